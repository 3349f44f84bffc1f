import json
import math
from collections import Counter

import numpy as np
import pytest

from mvdistill.core.config import CameraConfig
from mvdistill.core.errors import CorruptShardError, DatasetVersionError, MissingShardError
from mvdistill.data.repository import MANIFEST_NAME, DatasetRepository, load_dataset, quantize, read_png
from mvdistill.data.synth import (
    build_dataset,
    make_toy_object,
    rasterize_view,
    render_object_record,
    silhouette_mask,
)
from mvdistill.geometry.camera import CameraPose
from mvdistill.schemas.models import Primitive, ToyObject


def _sphere() -> ToyObject:
    return ToyObject(
        object_id="sphere",
        primitives=[Primitive(shape="sphere", center=(0, 0, 0), half_extent=0.3, albedo=(0.2, 0.4, 0.6))],
    )


@pytest.mark.parametrize("seed", range(20))
def test_toy_objects_fit_the_unit_sphere(seed):
    obj = make_toy_object(np.random.default_rng(seed))
    assert 1 <= len(obj.primitives) <= 4
    assert all(p.bounding_radius <= 1.0 + 1e-9 for p in obj.primitives)


def test_background_is_exactly_white_and_the_object_is_not():
    view = rasterize_view(_sphere(), CameraPose.from_degrees(0, 0, 1.5), 32)
    image = view.image
    assert image.shape == (32, 32, 3)
    assert np.all(image[0, 0] == 1.0)
    center = image[16, 16]
    assert np.all(center < 1.0)
    # headlight hits the sphere head-on, so the center is close to full albedo
    np.testing.assert_allclose(center, [0.2, 0.4, 0.6], atol=0.02)


def test_unsupported_resolution_is_rejected():
    with pytest.raises(ValueError):
        rasterize_view(_sphere(), CameraPose.from_degrees(0, 0, 1.5), 48)


def test_object_records_are_a_pure_function_of_seed_and_index():
    camera = CameraConfig(views_per_object=4)
    a = render_object_record(3, 11, 32, camera)
    b = render_object_record(3, 11, 32, camera)
    assert a.object == b.object
    for va, vb in zip(a.random_views + a.fixed_views, b.random_views + b.fixed_views):
        assert np.array_equal(va.image, vb.image)
        assert va.pose == vb.pose


def test_parallel_build_matches_serial(tmp_path):
    camera = CameraConfig(views_per_object=4)
    build_dataset(3, 5, tmp_path / "serial", resolution=32, camera=camera, workers=1)
    build_dataset(3, 5, tmp_path / "parallel", resolution=32, camera=camera, workers=3)
    serial = sorted(p.relative_to(tmp_path / "serial") for p in (tmp_path / "serial").rglob("*.png"))
    assert len(serial) == 3 * 8
    for rel in serial:
        assert (tmp_path / "serial" / rel).read_bytes() == (tmp_path / "parallel" / rel).read_bytes()


def test_dataset_round_trips_through_disk(tiny_dataset, tiny_camera):
    records = list(load_dataset(tiny_dataset))
    assert len(records) == 3
    record = records[0]
    assert len(record.random_views) == len(record.fixed_views) == tiny_camera.views_per_object
    fresh = render_object_record(0, 7, 32, tiny_camera)
    assert record.object == fresh.object
    np.testing.assert_array_equal(quantize(record.random_views[2].image), quantize(fresh.random_views[2].image))
    assert record.fixed_views[1].pose.azimuth == pytest.approx(fresh.fixed_views[1].pose.azimuth)


def test_missing_manifest_is_an_explicit_error(tmp_path):
    with pytest.raises(MissingShardError):
        load_dataset(tmp_path)


def test_manifest_version_mismatch(tmp_path):
    build_dataset(1, 0, tmp_path, resolution=32, camera=CameraConfig(views_per_object=4))
    path = tmp_path / MANIFEST_NAME
    data = json.loads(path.read_text())
    data["schema_version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(DatasetVersionError):
        DatasetRepository(tmp_path).read_manifest()


def test_missing_shard_is_reported(tmp_path):
    build_dataset(1, 0, tmp_path, resolution=32, camera=CameraConfig(views_per_object=4))
    (tmp_path / "obj_00000" / "fixed_01.png").unlink()
    with pytest.raises(MissingShardError):
        list(load_dataset(tmp_path))


def test_corrupt_image_is_reported(tmp_path):
    build_dataset(1, 0, tmp_path, resolution=32, camera=CameraConfig(views_per_object=4))
    (tmp_path / "obj_00000" / "random_02.png").write_bytes(b"not a png")
    with pytest.raises(CorruptShardError):
        list(load_dataset(tmp_path))


def test_image_of_the_wrong_size_is_corrupt(tmp_path):
    build_dataset(1, 0, tmp_path, resolution=32, camera=CameraConfig(views_per_object=4))
    path = tmp_path / "obj_00000" / "fixed_00.png"
    assert read_png(path, 32).shape == (32, 32, 3)
    with pytest.raises(CorruptShardError):
        read_png(path, 64)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Geometry checks
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def projected_disc_area(radius: float, distance: float, resolution: int, fov_y_deg: float) -> float:
    """Pixel area of a centered sphere's silhouette under a pinhole camera."""
    focal = 0.5 * resolution / math.tan(0.5 * math.radians(fov_y_deg))
    tan_half_angle = radius / math.sqrt(distance**2 - radius**2)
    return math.pi * (focal * tan_half_angle) ** 2


@pytest.mark.parametrize("elevation, azimuth", [(0, 0), (30, 120), (-10, 250)])
def test_sphere_silhouette_matches_the_projected_disc(elevation, azimuth):
    camera = CameraConfig()
    mask = silhouette_mask(_sphere(), CameraPose.from_degrees(elevation, azimuth, 1.5), 128)
    expected = projected_disc_area(0.3, 1.5, 128, camera.fov_y_deg)
    assert int(mask.sum()) == pytest.approx(expected, rel=0.02)

    image = rasterize_view(_sphere(), CameraPose.from_degrees(elevation, azimuth, 1.5), 128).image
    assert np.array_equal((image < 1.0).any(axis=-1), mask)


def test_centered_sphere_looks_the_same_from_every_azimuth():
    reference = rasterize_view(_sphere(), CameraPose.from_degrees(30, 0, 1.5), 64).image
    for azimuth in (45, 90, 217, 333):
        turned = rasterize_view(_sphere(), CameraPose.from_degrees(30, azimuth, 1.5), 64).image
        np.testing.assert_allclose(turned, reference, atol=1e-9)


def test_primitive_counts_cover_one_to_four():
    counts = Counter(len(make_toy_object(np.random.default_rng(seed)).primitives) for seed in range(1000))
    assert sorted(counts) == [1, 2, 3, 4]
    assert all(150 <= counts[k] <= 350 for k in range(1, 5)), counts


def test_fixed_views_rerasterize_bit_exactly(tiny_dataset, tiny_camera):
    fov_y = math.radians(tiny_camera.fov_y_deg)
    for record in load_dataset(tiny_dataset):
        for view in record.fixed_views:
            fresh = rasterize_view(record.object, view.pose, 32, fov_y)
            assert np.array_equal(quantize(fresh.image), quantize(view.image))
