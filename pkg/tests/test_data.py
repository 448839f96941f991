import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodule3d.boxes import DetectionBox
from nodule3d.data import (
    SynthConfig,
    Volume,
    crop,
    cross_section_augment,
    load_mhd,
    patch_extract,
    preprocess_hu,
    read_dataset,
    reorient,
    restore,
    sample_diameters,
    shift_augment,
    synth_generate,
    tile_origins,
    write_dataset,
)
from nodule3d.io import (
    DataError,
    read_annotations,
    read_detections,
    write_annotations,
    write_detections,
)


@pytest.fixture
def mhd_fixture(tmp_path):
    """Hand-written 2x2x2 MET_SHORT image holding 0..7, x fastest."""
    raw = tmp_path / "tiny.raw"
    raw.write_bytes(np.arange(8, dtype="<i2").tobytes())
    hdr = tmp_path / "tiny.mhd"
    hdr.write_text(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n"
        "Offset = -10.5 20 30.25\nElementSpacing = 0.7 0.8 2.5\nDimSize = 2 2 2\n"
        "ElementType = MET_SHORT\nElementDataFile = tiny.raw\n"
    )
    return hdr


class TestMhd:
    def test_exact_values(self, mhd_fixture):
        v = load_mhd(mhd_fixture)
        expected = np.array([[[0, 1], [2, 3]], [[4, 5], [6, 7]]])
        assert np.array_equal(v.intensities, expected)
        assert v.intensities[1, 0, 1] == 5  # z=1, y=0, x=1

    def test_spacing_and_origin_reversed(self, mhd_fixture):
        v = load_mhd(mhd_fixture)
        assert v.spacing.tolist() == [2.5, 0.8, 0.7]
        assert v.origin.tolist() == [30.25, 20.0, -10.5]

    def test_size_mismatch(self, mhd_fixture):
        mhd_fixture.write_text(mhd_fixture.read_text().replace("DimSize = 2 2 2", "DimSize = 2 2 3"))
        with pytest.raises(DataError, match="DimSize"):
            load_mhd(mhd_fixture)

    def test_unsupported_type(self, mhd_fixture):
        mhd_fixture.write_text(mhd_fixture.read_text().replace("MET_SHORT", "MET_UCHAR"))
        with pytest.raises(DataError, match="unsupported"):
            load_mhd(mhd_fixture)


class TestPreprocess:
    def test_reference_points(self):
        v = Volume(np.array([-1200.0, -300.0, 600.0, 2000.0]).reshape(1, 1, 4))
        assert preprocess_hu(v).intensities.ravel().tolist() == [0.0, 0.5, 1.0, 1.0]

    def test_mask(self):
        mask = np.zeros((2, 2, 2), bool)
        mask[0] = True
        out = preprocess_hu(Volume(np.zeros((2, 2, 2)), lung_mask=mask)).intensities
        assert np.all(out[1] == 0) and np.all(out[0] > 0)

    @given(st.lists(st.floats(-3000, 3000), min_size=2, max_size=20))
    def test_range_and_monotone(self, hu):
        hu = np.sort(np.array(hu))
        out = preprocess_hu(Volume(hu.reshape(1, 1, -1))).intensities.ravel()
        assert out.min() >= 0 and out.max() <= 1
        assert np.all(np.diff(out) >= 0)


class TestReorientation:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(0)
        v = Volume(rng.random((5, 6, 7)), annotations=[[1, 2, 3, 2.5]])
        for plane in ("axial", "coronal", "sagittal"):
            back = restore(reorient(v, plane), plane)
            assert np.array_equal(back.intensities, v.intensities)
            assert np.array_equal(back.annotations, v.annotations)

    def test_marker_voxel_follows_annotation(self):
        arr = np.zeros((5, 6, 7))
        arr[1, 2, 3] = 1
        v = Volume(arr, annotations=[[1, 2, 3, 4.0]])
        for r in cross_section_augment(v):
            z, y, x, d = r.annotations[0]
            assert r.intensities[int(z), int(y), int(x)] == 1
            assert d == 4.0


class TestShift:
    def test_zero_shift_identity(self):
        a = np.arange(27.0).reshape(3, 3, 3)
        assert np.array_equal(shift_augment(a, shift=(0, 0, 0)), a)

    def test_there_and_back(self):
        a = np.arange(1, 28.0).reshape(3, 3, 3)
        b = shift_augment(shift_augment(a, shift=(1, 0, 0)), shift=(-1, 0, 0))
        assert np.all(b[-1] == 0) and np.array_equal(b[:-1], a[:-1])

    def test_annotation_offset(self):
        a = np.zeros((5, 5, 5))
        a[2, 2, 2] = 1
        out, ann = shift_augment(a, [[2, 2, 2, 1]], shift=(1, -1, 0))
        z, y, x, _ = ann[0].astype(int)
        assert out[z, y, x] == 1


class TestSynth:
    def test_deterministic(self):
        a = synth_generate(SynthConfig(size=32, seed=4))
        b = synth_generate(SynthConfig(size=32, seed=4))
        assert np.array_equal(a.intensities, b.intensities)
        assert np.array_equal(a.annotations, b.annotations)

    def test_nodule_count_and_borders(self):
        v = synth_generate(SynthConfig(size=48, nodules=(3, 3), seed=1))
        assert len(v.annotations) == 3
        for z, y, x, d in v.annotations:
            c = np.array([z, y, x])
            assert np.all(c >= d / 2) and np.all(c <= 47 - d / 2)

    def test_diameter_mean(self):
        d = sample_diameters(SynthConfig(), 1000, np.random.default_rng(0))
        assert abs(d.mean() - 8.32) / 8.32 < 0.05

    def test_overcrowded_fails(self):
        with pytest.raises(DataError):
            synth_generate(SynthConfig(size=16, nodules=(40, 40), max_retries=5))

    def test_blob_detector_recovers_nodules(self):
        """Thresholded local maxima of the denoised volume find the annotated nodules."""
        from numpy.lib.stride_tricks import sliding_window_view as windows

        found = total = 0
        for seed in range(10):
            v = preprocess_hu(synth_generate(SynthConfig(size=64, noise=20.0, tubes=(0, 0), seed=seed)))
            smooth = windows(np.pad(v.intensities, 1, mode="edge"), (3, 3, 3)).mean(axis=(-3, -2, -1))
            local_max = windows(np.pad(smooth, 2, mode="edge"), (5, 5, 5)).max(axis=(-3, -2, -1))
            pts = np.argwhere((smooth == local_max) & (smooth > 0.25))  # background sits near 0.19
            for z, y, x, d in v.annotations:
                total += 1
                if len(pts) and np.min(np.linalg.norm(pts - [z, y, x], axis=1)) <= d / 2:
                    found += 1
        assert found / total >= 0.95


class TestPatches:
    def test_single_tile(self):
        v = Volume(np.zeros((128, 128, 128), np.float32))
        ps = patch_extract(v, 128, "test", overlap=32)
        assert len(ps) == 1 and ps[0].origin == (0, 0, 0)

    def test_local_annotation(self):
        v = Volume(np.zeros((224, 224, 224), np.float32), annotations=[[60, 60, 60, 5]])
        origins = [p.origin for p in patch_extract(v, 128, "test", overlap=32)]
        assert len(origins) == 8 and set(origins) == {(a, b, c) for a in (0, 96) for b in (0, 96) for c in (0, 96)}
        assert tile_origins(224, 128, 32) == [0, 96]
        # a patch origin of 32 maps (60, 60, 60) to (28, 28, 28)
        from nodule3d.data import local_annotations

        assert local_annotations(v.annotations, (32, 32, 32), 128)[0, :3].tolist() == [28, 28, 28]

    def test_tiling_160(self):
        assert tile_origins(160, 128, 32) == [0, 32]

    def test_train_oversampling(self):
        v = synth_generate(SynthConfig(size=96, nodules=(1, 1), seed=2))
        ps = patch_extract(v, 32, "train", n=400, p_nodule=0.7, rng=np.random.default_rng(0))
        frac = np.mean([len(p.annotations) > 0 for p in ps])
        assert 0.65 <= frac <= 0.85

    def test_crop_pads_with_zero(self):
        a = np.ones((4, 4, 4))
        c = crop(a, (-2, 0, 0), 4)
        assert np.all(c[:2] == 0) and np.all(c[2:] == 1)


class TestCsvIo:
    def test_annotations_round_trip(self, tmp_path):
        ann = {"s1": np.array([[1.5, 2.25, 3.0, 4.0]]), "s2": np.array([[9.0, 8.0, 7.0, 6.5], [1, 1, 1, 1.0]])}
        write_annotations(tmp_path / "a.csv", ann)
        back = read_annotations(tmp_path / "a.csv")
        assert back.keys() == ann.keys()
        for k in ann:
            assert np.array_equal(back[k], ann[k])

    def test_world_round_trip(self, tmp_path):
        ann = {"s": np.array([[10.0, 20.0, 30.0, 8.0]])}
        geo = {"s": ((2.5, 0.7, 0.7), (-300.0, -150.0, 20.0))}
        write_annotations(tmp_path / "w.csv", ann, world=True, geometry=geo)
        header = (tmp_path / "w.csv").read_text().splitlines()[0]
        assert header == "seriesuid,coordX,coordY,coordZ,diameter_mm"
        back = read_annotations(tmp_path / "w.csv", world=True, geometry=geo)
        np.testing.assert_allclose(back["s"], ann["s"], rtol=1e-12)

    def test_detections_round_trip(self, tmp_path):
        dets = {"a": [DetectionBox(1.25, 2, 3, 4, 0.875), DetectionBox(5, 6, 7, 8, 0.1)]}
        write_detections(tmp_path / "d.csv", dets)
        assert (tmp_path / "d.csv").read_text().startswith("series_id,z,y,x,diameter_vox,score\n")
        assert read_detections(tmp_path / "d.csv") == dets

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            read_detections(tmp_path / "x.csv")


def test_dataset_round_trip(tmp_path):
    vols = [synth_generate(SynthConfig(size=24, seed=s), f"v{s}") for s in range(2)]
    write_dataset(tmp_path, vols)
    back = read_dataset(tmp_path)
    assert [v.series_id for v in back] == ["v0", "v1"]
    for a, b in zip(vols, back):
        assert np.array_equal(a.intensities, b.intensities)
        assert np.array_equal(a.annotations, b.annotations)
