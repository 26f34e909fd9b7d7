import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deqflow.datagen import (
    GenSpec,
    dataset_to_csv,
    gen_gaussian_negation,
    gen_teacher_delm,
    gen_uniform_negation,
    generate,
    read_dataset_csv,
    teacher_from_json,
    teacher_to_json,
    write_dataset_csv,
)
from deqflow.equilibrium import forward
from deqflow.exceptions import InvalidInputError


def test_noise_free_negation_is_exact():
    for kind in ("gaussian_negation", "uniform_negation"):
        data, _ = generate(GenSpec(kind, n=50, m=4, noise_std=0.0, seed=1))
        np.testing.assert_array_equal(data.Y, -data.Phi)


def test_noise_level_matches_request():
    data = gen_gaussian_negation(GenSpec(n=4000, m=5, noise_std=0.1, seed=2))
    resid = data.Y + data.Phi
    assert abs(resid.std() - 0.1) < 0.005
    assert abs(resid.mean()) < 0.005


def test_gaussian_feature_moments():
    data = gen_gaussian_negation(GenSpec(n=5000, m=3, seed=3))
    assert abs(data.Phi.std() - 1.0) < 0.03
    np.testing.assert_allclose(np.cov(data.Phi), np.eye(3), atol=0.05)


def test_uniform_features_in_box():
    data = gen_uniform_negation(GenSpec("uniform_negation", n=2000, m=6, seed=4))
    assert data.Phi.min() >= -1.0 and data.Phi.max() < 1.0
    assert abs(data.Phi.var() - 1 / 3) < 0.02


@given(st.integers(0, 2**32), st.sampled_from(["gaussian_negation", "uniform_negation", "teacher_delm"]))
def test_same_seed_same_data(seed, kind):
    spec = GenSpec(kind, n=7, m=3, seed=seed)
    a, _ = generate(spec)
    b, _ = generate(spec)
    np.testing.assert_array_equal(a.Phi, b.Phi)
    np.testing.assert_array_equal(a.Y, b.Y)


def test_different_seeds_differ():
    a = gen_gaussian_negation(GenSpec(n=5, m=2, seed=0))
    b = gen_gaussian_negation(GenSpec(n=5, m=2, seed=1))
    assert not np.array_equal(a.Phi, b.Phi)


def test_features_full_rank():
    for n, m in ((3, 5), (20, 5), (5, 5)):
        data, _ = generate(GenSpec(n=n, m=m, seed=n))
        assert np.linalg.matrix_rank(data.Phi) == min(n, m)


def test_teacher_targets():
    spec = GenSpec("teacher_delm", n=30, m=4, noise_std=0.0, seed=5)
    data, teacher = gen_teacher_delm(spec)
    assert data.m_y == 1 and teacher.gamma == 0.8
    np.testing.assert_allclose(data.Y, forward(teacher, data.Phi), rtol=0, atol=0)
    multi, t2 = gen_teacher_delm(GenSpec("teacher_delm", n=10, m=4, m_y=3, seed=5))
    assert multi.Y.shape == (3, 10) and t2.B.shape == (3, 4)


def test_teacher_independent_of_n():
    # Teacher weights come from their own streams, so sample count does not move them.
    _, t1 = gen_teacher_delm(GenSpec("teacher_delm", n=10, m=4, seed=6))
    _, t2 = gen_teacher_delm(GenSpec("teacher_delm", n=500, m=4, seed=6))
    np.testing.assert_array_equal(t1.A, t2.A)
    np.testing.assert_array_equal(t1.B, t2.B)


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        GenSpec("spiral")
    with pytest.raises(InvalidInputError):
        GenSpec(n=-1)
    with pytest.raises(InvalidInputError):
        GenSpec(noise_std=-0.1)
    with pytest.raises(InvalidInputError):
        GenSpec(gamma_teacher=1.0)
    with pytest.raises(InvalidInputError):
        GenSpec("gaussian_negation", m=3, m_y=1)
    assert GenSpec(m=3).m_y == 3
    with pytest.raises(InvalidInputError):
        gen_uniform_negation(GenSpec())


def test_csv_roundtrip_is_lossless(tmp_path):
    spec = GenSpec("teacher_delm", n=12, m=3, m_y=2, noise_std=0.25, seed=7)
    data, _ = generate(spec)
    path = tmp_path / "d.csv"
    write_dataset_csv(path, data, spec)
    back, spec_back = read_dataset_csv(path)
    np.testing.assert_array_equal(back.Phi, data.Phi)
    np.testing.assert_array_equal(back.Y, data.Y)
    assert spec_back == spec
    text = path.read_text()
    assert text.splitlines()[0] == "# kind: str = teacher_delm"
    assert len(text.splitlines()) == 8 + 12
    assert dataset_to_csv(back, spec_back) == text


def test_csv_rejects_bad_files(tmp_path):
    spec = GenSpec(n=3, m=2, seed=0)
    data, _ = generate(spec)
    text = dataset_to_csv(data, spec)
    bad = tmp_path / "bad.csv"
    bad.write_text(text.replace("# seed", "# sead"))
    with pytest.raises(InvalidInputError):
        read_dataset_csv(bad)
    bad.write_text("\n".join(text.splitlines()[:-1]) + "\n")
    with pytest.raises(InvalidInputError):
        read_dataset_csv(bad)
    bad.write_text(text.replace("format_version: int = 1", "format_version: int = 9"))
    with pytest.raises(InvalidInputError):
        read_dataset_csv(bad)


def test_teacher_json_roundtrip():
    _, t = gen_teacher_delm(GenSpec("teacher_delm", n=4, m=3, seed=8))
    back = teacher_from_json(teacher_to_json(t))
    np.testing.assert_array_equal(back.A, t.A)
    np.testing.assert_array_equal(back.B, t.B)
    assert back.gamma == t.gamma


def test_empty_dataset():
    data, _ = generate(GenSpec(n=0, m=3))
    assert data.Phi.shape == (3, 0)
