"""Scene, camera and mock-service builders shared by the test modules."""
import http.server
import json
import threading
import time

import numpy as np

from eegsplat.gaussians import GaussianBatch, make_camera


def random_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(rng, n=5, spread=0.6):
    return GaussianBatch(
        rng.uniform(-spread, spread, (n, 3)),
        random_quaternions(rng, n),
        rng.uniform(0.08, 0.35, (n, 3)),
        rng.uniform(0.05, 0.95, (n, 3)),
        rng.uniform(0.3, 0.95, n),
    )


def random_camera(rng, size=16, radius=3.0, fov=50.0):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    d[1] = np.clip(d[1], -0.8, 0.8)
    return make_camera(radius * d / np.linalg.norm(d), (0, 0, 0), width=size, height=size, fov_deg=fov)


def scene_dicts(batch):
    return [dict(mu=batch.mu[i], rotation=batch.rotation[i], scale=batch.scale[i],
                 color=batch.color[i], opacity=float(batch.opacity[i])) for i in range(len(batch))]


def fd_check_render(batch, cam, dpix, h=1e-4, background=(0.1, 0.2, 0.3)):
    """Compare analytic render gradients with central differences.

    Returns ``(max_rel_err, n_checked, n_skipped)``; entries whose
    perturbation moves any pixel across the cutoff are skipped.
    """
    from eegsplat.gaussians import render, render_backward, support_mask
    from oracles import rel_err

    grads = render_backward(batch, cam, background, dpix)
    base_mask = support_mask(batch, cam)
    worst, checked, skipped = 0.0, 0, 0
    for name in ("mu", "rotation", "scale", "color", "opacity"):
        arr = getattr(batch, name)
        for idx in np.ndindex(arr.shape):
            vals = []
            crossed = False
            for sign in (1, -1):
                b = batch.copy()
                getattr(b, name)[idx] += sign * h
                if not np.array_equal(support_mask(b, cam), base_mask):
                    crossed = True
                    break
                vals.append(np.sum(render(b, cam, background).pixels * dpix))
            if crossed:
                skipped += 1
                continue
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, float(rel_err(getattr(grads, name)[idx], fd, floor=1e-4)))
            checked += 1
    return worst, checked, skipped


class MockLayoutServer:
    """Serves one canned response per POST; ``delay`` stalls before replying."""

    def __init__(self, body: bytes, status=200, delay=0.0):
        outer = self
        self.requests = []

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                outer.requests.append(json.loads(self.rfile.read(n)))
                time.sleep(delay)
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                except OSError:
                    pass

            def log_message(self, *args):
                pass

        self.httpd = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/layout"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
