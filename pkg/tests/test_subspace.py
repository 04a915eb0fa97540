import math

import numpy as np
import pytest

from bbtune.objective import PlantedQuadratic
from bbtune.subspace import (
    Distribution,
    ProjectionSpec,
    PromptSource,
    load_prompt_base,
    make_projection,
    make_prompt_base,
    project,
    save_prompt_base,
)


def test_uniform_bound():
    A = make_projection(ProjectionSpec(2000, 500, "uniform", seed=1))
    assert A.dtype == np.float32 and A.shape == (2000, 500)
    assert np.abs(A).max() <= math.sqrt(6 / 500)
    # the support is actually used
    assert np.abs(A).max() > 0.99 * math.sqrt(6 / 500)


def test_normal_variance():
    A = make_projection(ProjectionSpec(10_000, 100, Distribution.NORMAL_ONE_OVER_D, seed=2))
    assert abs(A.var() - 0.01) < 0.001


def test_projection_is_deterministic():
    spec = ProjectionSpec(300, 20, seed=9)
    assert np.array_equal(make_projection(spec), make_projection(spec))
    assert not np.array_equal(make_projection(spec), make_projection(ProjectionSpec(300, 20, seed=10)))


def test_sub_dim_above_full_dim_rejected():
    with pytest.raises(ValueError):
        ProjectionSpec(10, 11)


def test_project_zero_gives_base():
    A = make_projection(ProjectionSpec(64, 8))
    p0 = make_prompt_base("random-vocab", 4, 16, np.random.default_rng(0).standard_normal((50, 16)))
    assert np.array_equal(project(A, np.zeros(8), p0), p0.values)


def test_project_all_ones():
    out = project(np.ones((12, 5)), np.ones(5), np.zeros(12))
    assert np.array_equal(out, np.full(12, 5.0))


def test_project_linearity():
    rng = np.random.default_rng(3)
    A = make_projection(ProjectionSpec(400, 30, seed=4))
    z1, z2 = rng.standard_normal(30), rng.standard_normal(30)
    zero = np.zeros(400)
    lhs = project(A, 2.5 * z1 - 0.7 * z2, zero)
    rhs = 2.5 * project(A, z1, zero) - 0.7 * project(A, z2, zero)
    assert np.linalg.norm(lhs - rhs) <= 1e-6 * np.linalg.norm(rhs)


def test_project_batch_matches_single():
    A = make_projection(ProjectionSpec(40, 6))
    zs = np.random.default_rng(1).standard_normal((3, 6))
    batch = project(A, zs, np.zeros(40))
    for z, row in zip(zs, batch):
        assert np.allclose(project(A, z, np.zeros(40)), row, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("z,p0", [(np.zeros(7), np.zeros(40)), (np.zeros(6), np.zeros(41)),
                                  (np.array([np.nan] * 6), np.zeros(40))])
def test_project_errors(z, p0):
    A = make_projection(ProjectionSpec(40, 6))
    with pytest.raises(ValueError):
        project(A, z, p0)


def test_zero_base_full_size():
    p0 = make_prompt_base(PromptSource.ZEROS, 50, 1024)
    assert p0.values.shape == (51200,) and not p0.values.any()


def test_random_vocab_single_row():
    table = np.arange(8, dtype=np.float32).reshape(1, 8)
    p0 = make_prompt_base("random-vocab", 1, 8, table)
    assert np.array_equal(p0.values, table[0])


def test_random_vocab_without_replacement():
    table = np.arange(40, dtype=np.float32).reshape(20, 2)
    p0 = make_prompt_base("random-vocab", 20, 2, table, seed=3)
    rows = p0.values.reshape(20, 2)[:, 0]
    assert len(set(rows)) == 20
    with pytest.raises(ValueError):
        make_prompt_base("random-vocab", 21, 2, table)


def test_prompt_file_round_trip(tmp_path):
    p0 = make_prompt_base("random-vocab", 5, 4, np.random.default_rng(2).standard_normal((30, 4)))
    path = tmp_path / "p0.bin"
    save_prompt_base(p0, path)
    raw = path.read_bytes()
    assert raw[:4] == b"BBP0" and len(raw) == 8 + 4 * 20
    loaded = load_prompt_base(path)
    assert loaded.values.astype(np.float32).tobytes() == p0.values.astype(np.float32).tobytes()
    save_prompt_base(loaded, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == raw
    via_kind = make_prompt_base("loaded", 5, 4, path=path)
    assert np.array_equal(via_kind.values, loaded.values)
    with pytest.raises(ValueError):
        make_prompt_base("loaded", 6, 4, path=path)


def test_truncated_prompt_file(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"BBP0" + (3).to_bytes(4, "little") + b"\0" * 11)
    with pytest.raises(ValueError):
        load_prompt_base(path)


def test_reachability():
    rng = np.random.default_rng(5)
    spec = ProjectionSpec(160, 40, seed=6)
    A = make_projection(spec)
    p0 = make_prompt_base("random-vocab", 10, 16, rng.standard_normal((100, 16)))
    for _ in range(20):
        z_star = rng.uniform(-5, 5, 40)
        assert PlantedQuadratic(A, z_star, p0)(z_star) == 0.0


def test_norm_scaling_constant_in_d():
    # fan-in scaling keeps ||Az||^2 independent of d for unit-scale coordinates;
    # the per-norm ratio itself is 2D/d, checked alongside
    D = 4000
    energies = []
    for d in (100, 500, 1000):
        A = make_projection(ProjectionSpec(D, d, seed=d)).astype(np.float64)
        z = np.random.default_rng(d + 1).standard_normal((20, d))
        sq = np.sum((z @ A.T) ** 2, axis=1)
        ratio = np.mean(sq / np.sum(z**2, axis=1))
        assert abs(ratio - 2 * D / d) <= 0.15 * 2 * D / d
        energies.append(np.mean(sq))
    mid = np.mean(energies)
    assert all(abs(e - mid) <= 0.15 * mid for e in energies)
