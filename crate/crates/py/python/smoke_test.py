"""Smoke test for the repaint3d extension module.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import json
import math
import os
import tempfile

import repaint3d as r3d


def main():
    assert r3d.plan_views() == [0, 40, 320, 80, 280, 120, 240, 160, 200]
    assert r3d.build_prompt("dresser", 0, "wooden") == "A photo of a wooden dresser, front view"

    sphere = r3d.Mesh.icosphere(1.0, 2)
    cam = r3d.Camera(0.0, resolution=32)
    depth = r3d.render_depth(sphere, cam)
    assert len(depth) == 32 and len(depth[0]) == 32
    centre = depth[16][16]
    assert abs(centre - 1.5) < 0.02, centre
    assert math.isinf(depth[0][0])

    assert r3d.fid([[0.0], [1.0], [2.0]], [[0.0], [1.0], [2.0]]) < 1e-8
    mean, _ = r3d.kid([[0.0], [1.0], [2.0]], [[0.0], [1.0], [2.0]], subset_size=3)
    assert abs(mean) < 1e-9
    scores = dict((s[0], s[1]) for s in r3d.bradley_terry([("a", "b"), ("b", "a"), ("a", "b")]))
    assert scores["a"] > scores["b"]

    quad = r3d.Mesh.quad()
    fine = r3d.remesh_planar(quad, 0.1)
    assert len(fine) > 100
    assert r3d.surface_deviation(quad, fine, 2000) < 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        feats = os.path.join(tmp, "f.bin")
        r3d.write_features(feats, "demo", [[1.0, 2.0], [3.0, 4.0]])
        ident, rows = r3d.read_features(feats)
        assert ident == "demo" and rows == [[1.0, 2.0], [3.0, 4.0]]

        mesh_path = os.path.join(tmp, "sphere.obj")
        sphere.save(mesh_path)
        cfg = {"resolution": 48, "density": 500.0, "target_edge": 0.0, "eval_views": False}
        manifest = json.loads(r3d.run_pipeline(mesh_path, os.path.join(tmp, "out"), json.dumps(cfg)))
        assert manifest["status"] == "ok"
        assert manifest["plan"] == [0, 40, 320, 80, 280, 120, 240, 160, 200]
        assert os.path.exists(os.path.join(tmp, "out", "final", "view_08.png"))

    print("repaint3d smoke test passed")


if __name__ == "__main__":
    main()
