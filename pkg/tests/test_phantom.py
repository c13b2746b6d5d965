import json

import numpy as np
import pytest
from scipy import ndimage

from sesaseg.distance import dpm_from_labels
from sesaseg.errors import SesaError
from sesaseg.metrics import surface_scar_metrics
from sesaseg.phantom import (
    PhantomSpec,
    ScarArc,
    generate,
    generate_suite,
    load_suite,
    randomize_spec,
    surface_scar_truth,
    validate_manifest,
)
from sesaseg.surface import classify_surface, hard_boundary_mask


@pytest.fixture(scope="module")
def suite():
    return generate_suite(4, 2, seed=7)


def test_seed_42_is_deterministic():
    a = generate(PhantomSpec(seed=42))
    b = generate(PhantomSpec(seed=42))
    assert a.checksum == b.checksum
    assert a.checksum != generate(PhantomSpec(seed=43)).checksum


def test_label_nesting(suite):
    _, cases = suite
    face = ndimage.generate_binary_structure(3, 1)
    for case in cases:
        la = case.la_label.data > 0
        ring = ndimage.binary_dilation(la, face, iterations=case.spec.wall_thickness) & ~la
        assert not (case.scar_mask & ~case.wall_mask).any()
        assert np.array_equal(case.wall_mask, ring)


def test_scar_is_brightest_class():
    case = generate(PhantomSpec(seed=1))
    img = case.intensity.data
    scar = img[case.scar_mask].mean()
    assert scar > img[case.wall_mask & ~case.scar_mask].mean()
    assert scar > img[case.la_label.data > 0].mean()


def test_quarter_arc_covers_a_quarter_of_the_band():
    spec = PhantomSpec()
    case = generate(spec)
    z = np.arange(spec.dims[2]) * spec.spacing[2] - spec.center_mm[2]
    band = np.zeros(spec.dims, bool)
    band[:, :, np.abs(z) <= spec.arcs[0].half_height] = True
    wall = case.wall_mask & band
    assert abs(case.scar_mask[wall].mean() - 0.25) <= 0.05


def test_no_arcs_means_no_scar():
    case = generate(PhantomSpec(arcs=()))
    assert not case.scar_mask.any()
    assert not surface_scar_truth(case).scar.any()


def test_infeasible_specs():
    with pytest.raises(SesaError):
        generate(PhantomSpec(semi_axes=(15.0, 8.0, 6.5)))
    with pytest.raises(SesaError):
        generate(PhantomSpec(arcs=(ScarArc(width=200), ScarArc(width=200))))
    with pytest.raises(SesaError):
        generate(PhantomSpec(wall_thickness=0))


def test_exact_dpm_recovers_surface_arcs(suite):
    _, cases = suite
    for case in cases:
        labeled = classify_surface(dpm_from_labels(case.wall_scar_label.data),
                                   hard_boundary_mask(case.la_label.data))
        assert surface_scar_metrics(labeled, surface_scar_truth(case))[1] >= 0.95


def test_suite_manifest_round_trip(tmp_path):
    manifest, cases = generate_suite(2, 1, seed=7, out_dir=tmp_path)
    again, _ = generate_suite(2, 1, seed=7)
    assert manifest == again
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert validate_manifest(on_disk, tmp_path)
    _, loaded, splits = load_suite(tmp_path)
    assert [splits[k] for k in sorted(splits)] == ["train", "train", "test"]
    for case in cases:
        assert loaded[case.case_id].checksum == case.checksum


def test_manifest_validation_catches_tampering(tmp_path):
    manifest, _ = generate_suite(1, 1, seed=3, out_dir=tmp_path)
    bad = dict(manifest, n_train=2)
    with pytest.raises(SesaError):
        validate_manifest(bad)
    entries = [dict(e) for e in manifest["cases"]]
    entries[0]["checksum"] = "0" * 64
    with pytest.raises(SesaError):
        validate_manifest(dict(manifest, cases=entries), tmp_path)


def test_fifteen_case_checksums_unique():
    manifest, _ = generate_suite(10, 5, seed=7)
    sums = [e["checksum"] for e in manifest["cases"]]
    assert len(sums) == 15 and len(set(sums)) == 15


def test_randomized_spec_stays_feasible():
    for seed in range(30):
        spec = randomize_spec(PhantomSpec(), seed)
        assert 1 <= len(spec.arcs) <= 2
        assert PhantomSpec.from_dict(spec.to_dict()) == spec
