"""Smoke test for the cenpbg_py extension.

Build first with `cargo build -p cenpbg-py --release`, then run
`python3 crates/py/python/smoke_test.py`. The script copies the most
recently built library into a temporary import path under the module's
name.
"""

import importlib
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[3]


def load_module(tmp):
    built = [ROOT / "target" / profile / name
             for profile in ("release", "debug")
             for name in ("libcenpbg_py.so", "libcenpbg_py.dylib", "cenpbg_py.dll")]
    built = [lib for lib in built if lib.exists()]
    if not built:
        sys.exit("extension not built: run `cargo build -p cenpbg-py --release`")
    lib = max(built, key=lambda p: p.stat().st_mtime)
    suffix = ".pyd" if lib.name.endswith(".dll") else ".so"
    shutil.copy(lib, pathlib.Path(tmp) / ("cenpbg_py" + suffix))
    sys.path.insert(0, tmp)
    return importlib.import_module("cenpbg_py")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        m = load_module(tmp)
        out = pathlib.Path(tmp)

        pose = m.Pose.from_translation(0.0, 0.0, 2.0)
        assert pose.camera_center() == [0.0, 0.0, 2.0]
        assert pose.world_to_camera([0.0, 0.0, 5.0]) == [0.0, 0.0, 3.0]
        k = m.Intrinsics(100.0, 100.0, 50.0, 25.0, 100, 50)
        assert k.project([0.0, 0.0, 1.0]) == (50.0, 25.0, 1.0)
        assert k.project([0.0, 0.0, -1.0]) is None
        assert (k.scale(1).width, k.scale(1).height) == (50, 25)

        scene = m.make_canyon(length=24.0, point_spacing=0.4, occluders=1,
                              width=256, height=128, focal=128.0, seed=3)
        seq = scene.sequence()
        train, test = seq.split()
        graph = m.ConnectivityGraph.build(seq, 5, train)
        assert graph.n == 5 and len(graph) == len(train)
        graph.save(str(out / "graph.bin"))
        assert m.ConnectivityGraph.load(str(out / "graph.bin")).frame_ids() == train

        smap = seq.map
        smap.save(str(out / "map.bin"))
        assert len(m.PointCloudMap.load(str(out / "map.bin"))) == len(smap)

        view = seq.pose(20)
        vis = m.visible_from(graph, smap, view, seq.intrinsics)
        assert vis.source_frame in (19, 21) and len(vis) > 0
        assert vis.point_indices == sorted(vis.point_indices)
        full = m.prune_visible(smap, view, seq.intrinsics)
        assert len(full) >= 1

        pyr = m.rasterize_pyramid(smap, vis.point_indices, view, seq.intrinsics)
        assert [(l.level, l.width, l.height) for l in pyr.levels()] == [
            (t, 256 >> t, 128 >> t) for t in range(6)]
        occ = [l.occupancy() for l in pyr.levels()]
        assert all(a <= b for a, b in zip(occ, occ[1:])), occ
        pyr.level(0).save(str(out / "l0.ras"))
        assert m.RasterImage.load(str(out / "l0.ras")).mask() == pyr.level(0).mask()

        img = m.render_rgb(pyr)
        gt = scene.paint(view)
        p, s = m.psnr(img, gt), m.ssim(img, gt)
        assert p > 25.0 and 0.0 < s <= 1.0, (p, s)
        assert math.isinf(m.psnr(gt, gt))
        img.write_ppm(str(out / "view.ppm"))
        assert m.RgbImage.read_ppm(str(out / "view.ppm")).width == 256

        assert m.generator_adv_loss([[[1.0, 1.0]], [[1.0]]]) == 0.0
        assert abs(m.generator_adv_loss([[[0.5]]]) - 0.25) < 1e-12
        assert abs(m.discriminator_adv_loss([[[0.2, 0.4]]], [[[0.9]]]) - 0.11) < 1e-12

        rows = m.run_strategy("connectivity", seq, graph, test, scene=scene)
        assert len(rows) == len(test)
        assert all(abs(r["leak"] + r["precision"] - 1.0) < 1e-12 for r in rows)

        uni = m.uniform_sequence(scans=30, points_per_scan=100, seed=1)
        assert len(uni.map) == 3000

        (out / "bad.bin").write_bytes(b"not a map at all, definitely")
        try:
            m.PointCloudMap.load(str(out / "bad.bin"))
        except m.FormatError:
            pass
        else:
            raise AssertionError("corrupt map was accepted")
        try:
            m.make_canyon(point_spacing=-1.0)
        except ValueError:
            pass
        else:
            raise AssertionError("invalid parameters were accepted")

        print(f"smoke test ok: {len(smap)} points, {len(vis)} visible, psnr={p:.2f} ssim={s:.3f}")


if __name__ == "__main__":
    main()
