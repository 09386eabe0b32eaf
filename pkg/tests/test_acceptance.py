"""Acceptance gate: ten criteria, one printed PASS/FAIL line each.

Criterion 7 trains the full desk-scale denoiser from scratch, so this
module takes over an hour end to end. Everything else in the suite runs
first if you deselect it (pytest --deselect tests/test_acceptance.py).
"""

import shutil
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binomtest

import voxbridge.cli as cli
from voxbridge.denoiser.checkpoint import load_checkpoint
from voxbridge.denoiser.pipeline import synthesize
from voxbridge.diffusion import (
    forward_sample,
    loss_target,
    make_schedule,
    reverse_step,
    sample,
)
from voxbridge.geometry.closest import MeshDistanceQuery
from voxbridge.geometry.cortex import (
    assd,
    cortical_thickness,
    fuse_cortex_sdf,
    sample_sdf_grid,
    simulate_atrophy,
)
from voxbridge.geometry.isosurface import extract_isosurface
from voxbridge.geometry.mesh import TriMesh, icosphere, load_mesh
from voxbridge.geometry.volume import load_volume
from voxbridge.metrics import ssim
from voxbridge.shapemodel import (
    LatentPoint,
    PcaModel,
    embed,
    flatten_sample,
    invert,
    mahalanobis,
    pca_fit,
    slerp_sample,
)

import test_tensor
import test_unet

# End-to-end training budget, tuned once on the fixed seeds below. The
# phantom population and fit seeds are pinned so the whole criterion is
# reproducible bit for bit; the loss curve lands around 0.04 and the mean
# test SSIM clears the 0.80 bar with margin at this epoch count.
E2E_EPOCHS = 28
E2E_TRAIN_SEED = 11
E2E_TEST_SEED = 12
E2E_FIT_SEED = 5

# Image levels are (background, interior, ribbon) = (0.0, 0.7, 1.0), so the
# outer surface sits at the 0.5 crossing and the inner one at 0.85 once the
# region outside the outer surface is filled up to the ribbon level.
PIAL_LEVEL = 0.5
WHITE_LEVEL = 0.85


def _cli(*argv) -> int:
    return cli.main([str(a) for a in argv])


def _criterion(k, capfd, body):
    t0 = time.perf_counter()
    try:
        detail = body()
    except BaseException:
        _announce(k, "FAIL", t0, capfd, None)
        raise
    _announce(k, "PASS", t0, capfd, detail)


def _announce(k, verdict, t0, capfd, detail):
    extra = f"; {detail}" if detail else ""
    line = f"CRITERION {k}: {verdict} ({time.perf_counter() - t0:.1f}s{extra})"
    with capfd.disabled():
        print(line, flush=True)


# ---------------------------------------------------------------------------
# 1. schedule exactness


def _rational_schedule(T):
    """Exact rational mirror of the per-step coefficient algebra."""
    alpha = [Fraction(t, T) for t in range(T + 1)]
    delta = [2 * a * (1 - a) for a in alpha]
    rows = {}
    for t in range(1, T + 1):
        a_s, a_p = alpha[t], alpha[t - 1]
        d_s, d_p = delta[t], delta[t - 1]
        if t == T:
            rows[t] = (Fraction(1), Fraction(0), 1 - a_p, d_p, Fraction(0))
            continue
        d_cond = d_s - d_p * (1 - a_s) ** 2 / (1 - a_p) ** 2
        c_x = (d_p / d_s) * (1 - a_s) / (1 - a_p) + (d_cond / d_s) * (1 - a_p)
        c_s = a_p - a_s * (1 - a_s) / (1 - a_p) * (d_p / d_s)
        c_f = (1 - a_p) * d_cond / d_s
        rows[t] = (c_x, c_s, c_f, d_cond * d_p / d_s, d_cond)
    return alpha, delta, rows


def test_criterion_01_schedule_exactness(capfd):
    def body():
        for T in (4, 10, 1000):
            sched = make_schedule(T)
            assert np.array_equal(sched.alpha, np.arange(T + 1) / T)
            assert sched.delta[0] == 0.0 and sched.delta[T] == 0.0
            assert sched.delta[T // 2] == 0.5
            assert float(np.max(np.abs(sched.delta - sched.delta[::-1]))) <= 1e-15
            _, delta, rows = _rational_schedule(T)
            exact_delta = np.array([float(d) for d in delta])
            assert np.allclose(sched.delta, exact_delta, rtol=0.0, atol=1e-15)
            got = np.stack([sched.c_xt, sched.c_st, sched.c_ft,
                            sched.delta_tilde, sched.delta_cond])
            assert np.all(np.isnan(got[:, 0]))
            want = np.array([[float(v) for v in rows[t]]
                             for t in range(1, T + 1)]).T
            assert np.allclose(got[:, 1:], want, rtol=0.0, atol=1e-12)
        sched = make_schedule(4)
        # hand-derived midpoint row for T=4
        assert abs(float(sched.c_xt[2]) - 1.0) <= 1e-12
        assert abs(float(sched.c_st[2]) - 0.0) <= 1e-12
        assert abs(float(sched.c_ft[2]) - 0.5) <= 1e-12
        assert abs(float(sched.delta_tilde[2]) - 0.25) <= 1e-12

    _criterion(1, capfd, body)


# ---------------------------------------------------------------------------
# 2. one-step transition composes to the marginal


def test_criterion_02_transition_marginal_consistency(capfd):
    def body():
        rng = np.random.default_rng(220822)
        n = 100_000
        for _ in range(5):
            T = int(rng.integers(4, 129))
            t = int(rng.integers(1, T + 1))
            sched = make_schedule(T)
            x0 = float(rng.uniform(-1.0, 1.0))
            xT = float(rng.uniform(-1.0, 1.0))
            a_t = float(sched.alpha[t])
            a_p = float(sched.alpha[t - 1])
            d_t = float(sched.delta[t])
            d_p = float(sched.delta[t - 1])
            # one-step kernel consistent with the conditional variance:
            # x_t = a x_{t-1} + b xT + sqrt(delta_cond[t]) eps
            a = (1.0 - a_t) / (1.0 - a_p)
            b = a_t - a * a_p
            x_prev = (1.0 - a_p) * x0 + a_p * xT \
                + np.sqrt(d_p) * rng.standard_normal(n)
            x_t = a * x_prev + b * xT \
                + np.sqrt(float(sched.delta_cond[t])) * rng.standard_normal(n)
            want_mean = (1.0 - a_t) * x0 + a_t * xT
            se_mean = np.sqrt(d_t / n)
            se_var = d_t * np.sqrt(2.0 / (n - 1))
            assert abs(float(np.mean(x_t)) - want_mean) <= 3.0 * se_mean + 1e-12
            assert abs(float(np.var(x_t, ddof=1)) - d_t) <= 3.0 * se_var + 1e-12

    _criterion(2, capfd, body)


# ---------------------------------------------------------------------------
# 3. oracle identities along the chain


def test_criterion_03_oracle_identities(capfd):
    def body():
        rng = np.random.default_rng(7)
        T = 50
        sched = make_schedule(T)
        shape = (7, 8, 9)
        x0 = rng.standard_normal(shape)
        xT = rng.standard_normal(shape)
        for t in range(T + 1):
            eps = rng.standard_normal(shape)
            x_t = forward_sample(x0, xT, t, eps, sched)
            target = loss_target(x0, xT, t, eps, sched)
            diff = np.abs(x_t - target - x0)
            # rounding floor set by the largest addend on either side, not
            # by the (possibly cancelled) final values
            a = float(sched.alpha[t])
            s = float(np.sqrt(sched.delta[t]))
            scale = np.maximum.reduce([
                np.abs(x0), np.abs((1.0 - a) * x0), np.abs(a * xT),
                np.abs(s * eps), np.abs(a * (xT - x0))])
            assert np.all(diff <= 4.0 * np.spacing(scale))
        # a perfect predictor keeps the noise-free chain on the straight line
        x = xT.copy()
        for t in range(T, 0, -1):
            x = reverse_step(x, x - x0, xT, t, None, sched)
            a_p = float(sched.alpha[t - 1])
            want = (1.0 - a_p) * x0 + a_p * xT
            assert float(np.max(np.abs(x - want))) <= 1e-10
        for n_steps in (1, 10, T):
            got = sample(lambda z, t: z - x0, xT, sched, n_steps)
            assert float(np.max(np.abs(got - x0))) <= 1e-8

    _criterion(3, capfd, body)


# ---------------------------------------------------------------------------
# 4. gradient checks


_GRAD_CHECKS = (
    test_tensor.test_add_sub_neg_mul,
    test_tensor.test_broadcasting_grads,
    test_tensor.test_scale_exp_sigmoid_silu_abs,
    test_tensor.test_mean_and_matmul,
    test_tensor.test_batched_matmul,
    test_tensor.test_reshape_concat,
    test_tensor.test_conv3d_grads,
    test_tensor.test_conv3d_1x1_grads,
    test_tensor.test_pool_and_upsample_grads,
    test_tensor.test_group_norm_grads,
    test_tensor.test_attention_grads,
    test_unet.test_full_network_gradcheck,
)


def test_criterion_04_gradient_checks(capfd):
    def body():
        # the finite-difference sweeps live next to the ops; the final entry
        # randomizes every parameter of a small network and checks end to end
        for check in _GRAD_CHECKS:
            check()
        return f"{len(_GRAD_CHECKS)} sweeps"

    _criterion(4, capfd, body)


# ---------------------------------------------------------------------------
# 5. geometry oracles


def _sheet(z, half=6.0, n=12):
    """Flat square sheet at height z, triangulated on an (n+1)^2 grid."""
    xs = np.linspace(-half, half, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(),
                      np.full(gx.size, float(z))], axis=1)
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b, c = a + 1, a + (n + 1)
            faces.append((a, b, c))
            faces.append((b, c + 1, c))
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def test_criterion_05_geometry_oracles(capfd):
    def body():
        rng = np.random.default_rng(55)
        dims = (18, 16, 17)
        spacing = (0.41, 0.37, 0.43)
        origin = tuple(-(d - 1) * s / 2.0 for d, s in zip(dims, spacing))
        for _ in range(20):
            s_p = sample_sdf_grid(
                icosphere(2, float(rng.uniform(2.2, 3.0)),
                          rng.uniform(-0.6, 0.6, 3)),
                dims, spacing, origin)
            s_w = sample_sdf_grid(
                icosphere(2, float(rng.uniform(1.0, 1.8)),
                          rng.uniform(-0.6, 0.6, 3)),
                dims, spacing, origin)
            s_c, ribbon = fuse_cortex_sdf(s_p, s_w)
            in_p = s_p.data <= 0.0
            in_w = s_w.data <= 0.0
            want = np.where(~in_p & ~in_w, s_p.data,
                            np.where(in_p & in_w, s_w.data, 0.0))
            assert np.array_equal(s_c.data, want.astype(s_p.data.dtype))
            assert np.array_equal(ribbon.data,
                                  (in_p != in_w).astype(s_p.data.dtype))
        sep = 0.7
        sheet = _sheet(0.0)
        shifted = _sheet(sep)
        assert abs(assd(sheet, shifted, n_points=20000, seed=3) - sep) \
            <= 0.02 * sep
        assert assd(sheet, sheet, n_points=20000, seed=3) < 1e-6
        thick = cortical_thickness(icosphere(3, 4.0), icosphere(3, 3.0))
        assert np.all(np.abs(thick - 1.0) <= 0.03)

    _criterion(5, capfd, body)


# ---------------------------------------------------------------------------
# 6. shape model


def _shape_population(n, seed, base, n_modes=5):
    """Random smooth radial deformations of a base sphere, with thickness."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_modes, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    unit = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
    freqs = np.arange(2.0, 2.0 + n_modes)
    fields = np.sin((unit @ dirs.T) * freqs)
    out = []
    for _ in range(n):
        radial = 1.0 + fields @ (0.08 * rng.standard_normal(n_modes))
        thick = 0.5 + 0.1 * (fields @ rng.standard_normal(n_modes))
        out.append(TriMesh(unit * radial[:, None], base.faces.copy(),
                           np.abs(thick) + 0.05))
    return out


def test_criterion_06_shape_model(capfd):
    def body():
        base = icosphere(1)
        samples = _shape_population(8, 66, base)
        model = pca_fit(samples, 7)
        for s in samples:
            flat = flatten_sample(s)
            recon = flatten_sample(invert(model, embed(model, s)))
            rel = float(np.max(np.abs(recon - flat))) \
                / float(np.max(np.abs(flat)))
            assert rel <= 1e-6
        rng = np.random.default_rng(6)
        e1 = rng.standard_normal(6)
        e2 = rng.standard_normal(6)
        assert np.array_equal(slerp_sample(e1, e2, 0.0).e, e1)
        end = np.linalg.norm(e1) * e2 / np.linalg.norm(e2)
        assert float(np.max(np.abs(slerp_sample(e1, e2, 1.0).e - end))) <= 1e-12
        r1 = float(np.linalg.norm(e1))
        for phi in np.linspace(0.0, 1.0, 21):
            arc = slerp_sample(e1, e2, float(phi))
            assert abs(float(np.linalg.norm(arc.e)) - r1) <= 1e-9
        # straight-line midpoints shrink toward the mean of an isotropic
        # population; great-circle midpoints hold their radius
        k, n = 8, 100
        iso = PcaModel(mean=np.zeros(4 * 12), basis=np.eye(4 * 12)[:k],
                       variances=np.ones(k), faces=icosphere(0).faces)
        rng = np.random.default_rng(60)
        wins = 0
        for _ in range(n):
            z1 = rng.standard_normal(k)
            z2 = rng.standard_normal(k)
            m_slerp = mahalanobis(iso, slerp_sample(z1, z2, 0.5))
            m_lerp = mahalanobis(iso, LatentPoint((z1 + z2) / 2.0))
            wins += m_slerp > m_lerp
        p = binomtest(wins, n, alternative="greater").pvalue
        assert p < 0.01
        return f"drift sign test p={p:.2e}"

    _criterion(6, capfd, body)


# ---------------------------------------------------------------------------
# 7. end-to-end phantom training


@pytest.fixture(scope="session")
def e2e_root(tmp_path_factory):
    return tmp_path_factory.mktemp("e2e")


@pytest.fixture(scope="session")
def phantom_sets(e2e_root):
    train_dir = e2e_root / "train"
    test_dir = e2e_root / "test"
    assert _cli("phantom", "--out", train_dir, "--cases", 200,
                "--seed", E2E_TRAIN_SEED) == 0
    assert _cli("sdf", "--dataset", train_dir) == 0
    assert _cli("phantom", "--out", test_dir, "--cases", 20,
                "--seed", E2E_TEST_SEED) == 0
    assert _cli("sdf", "--dataset", test_dir) == 0
    return train_dir, test_dir


@pytest.fixture(scope="session")
def trained_checkpoint(e2e_root, phantom_sets):
    train_dir, _ = phantom_sets
    out = e2e_root / "fit"
    assert _cli("train", "--dataset", train_dir, "--out", out,
                "--epochs", E2E_EPOCHS, "--seed", E2E_FIT_SEED) == 0
    return out / "checkpoint.c2ck"


def _extract_surfaces(image, pial_sdf_data):
    pial = extract_isosurface(image, PIAL_LEVEL)
    white = extract_isosurface(image, WHITE_LEVEL,
                               fill_mask=pial_sdf_data > 0.0, fill_value=1.0)
    return pial, white


def test_criterion_07_end_to_end_phantom_training(capfd, phantom_sets,
                                                  trained_checkpoint):
    def body():
        _, test_dir = phantom_sets
        state = load_checkpoint(trained_checkpoint)
        cases = sorted(p for p in test_dir.iterdir()
                       if p.is_dir() and p.name.startswith("case_"))
        assert len(cases) == 20
        scores = []
        worst_assd = 0.0
        for case in cases:
            ref = load_volume(case / "image.c2vx")
            cond = cli._load_condition(case, state.cond_spec.active_aux)
            gen = synthesize(state, cond, n_steps=10)
            scores.append(ssim(gen, ref))
            voxel = float(min(ref.spacing))
            pial_hat, white_hat = _extract_surfaces(
                gen, load_volume(case / "s_p.c2vx").data)
            d_p = assd(pial_hat, load_mesh(case / "pial.obj"),
                       n_points=20000, seed=1)
            d_w = assd(white_hat, load_mesh(case / "wm.obj"),
                       n_points=20000, seed=1)
            worst_assd = max(worst_assd, d_p / voxel, d_w / voxel)
            assert d_p <= 1.5 * voxel
            assert d_w <= 1.5 * voxel
        mean_ssim = float(np.mean(scores))
        assert mean_ssim >= 0.80
        return (f"mean ssim {mean_ssim:.4f} (min {min(scores):.4f}), "
                f"worst assd {worst_assd:.2f} voxels")

    _criterion(7, capfd, body)


# ---------------------------------------------------------------------------
# 8. atrophy recovery


def _mean_surface_gap(m_a, m_b):
    d_ab = MeshDistanceQuery(m_b).unsigned(m_a.vertices)
    d_ba = MeshDistanceQuery(m_a).unsigned(m_b.vertices)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def test_criterion_08_atrophy_recovery(capfd, phantom_sets,
                                       trained_checkpoint, tmp_path):
    def body():
        _, test_dir = phantom_sets
        case = test_dir / "case_0000"
        m_p = load_mesh(case / "pial.obj")
        m_w = load_mesh(case / "wm.obj")
        base_thick = cortical_thickness(m_p, m_w)
        mesh_errs = []
        for delta in (0.1, 0.35, 0.6):
            thinned = simulate_atrophy(m_p, m_w, delta)
            recovered = float(np.mean(
                base_thick - cortical_thickness(thinned, m_w)))
            mesh_errs.append(abs(recovered - delta))
        mesh_mae = float(np.mean(mesh_errs))
        assert mesh_mae <= 0.05

        # image round trip: resynthesize at each thinning level and compare
        # the gap between the extracted surfaces against the baseline
        gaps = {}
        for delta in (0.0, 0.15, 0.4, 0.6):
            out = tmp_path / f"atrophy_{int(delta * 100):03d}"
            assert _cli("atrophy", "--wm", case / "wm.obj",
                        "--pial", case / "pial.obj", "--delta", delta,
                        "--out", out, "--checkpoint", trained_checkpoint,
                        "--n-steps", 10) == 0
            image = load_volume(out / "image.c2vx")
            deformed = load_mesh(out / "pial.obj")
            s_p = sample_sdf_grid(deformed, image.dims, image.spacing,
                                  image.origin)
            pial_hat, white_hat = _extract_surfaces(image, s_p.data)
            gaps[delta] = _mean_surface_gap(pial_hat, white_hat)
        image_errs = [abs((gaps[0.0] - gaps[d]) - d) for d in (0.15, 0.4, 0.6)]
        image_mae = float(np.mean(image_errs))
        assert image_mae <= 0.25
        return f"mesh MAE {mesh_mae:.3f}, image round-trip MAE {image_mae:.3f}"

    _criterion(8, capfd, body)


# ---------------------------------------------------------------------------
# 9. conditioning ablations


ABLATIONS = (("", 2), ("edge,ribbon", 4), ("s_p,s_w,edge,ribbon", 6))


def test_criterion_09_conditioning_ablations(capfd, phantom_sets, tmp_path):
    def body():
        train_dir, _ = phantom_sets
        subset = tmp_path / "subset"
        subset.mkdir()
        for name in ("case_0000", "case_0001", "case_0002"):
            shutil.copytree(train_dir / name, subset / name)
        seen = []
        for i, (aux, want_channels) in enumerate(ABLATIONS):
            out = tmp_path / f"ablation_{i}"
            assert _cli("train", "--dataset", subset, "--out", out,
                        "--epochs", 1, "--seed", 9, "--T", 20,
                        "--stage-channels", "4,6,8", "--attention-factor", 4,
                        "--heads", 1, "--head-channels", 4, "--groups", 2,
                        "--active-aux", aux) == 0
            state = load_checkpoint(out / "checkpoint.c2ck")
            assert state.net.config.in_channels == want_channels
            assert state.cond_spec.active_aux == \
                tuple(a for a in aux.split(",") if a)
            seen.append(state.net.config.in_channels)
            synth_out = tmp_path / f"ablation_{i}_synth"
            assert _cli("synth", "--checkpoint", out / "checkpoint.c2ck",
                        "--case", subset / "case_0000", "--out", synth_out,
                        "--n-steps", 2) == 0
            assert (synth_out / "image.c2vx").is_file()
        assert seen == [2, 4, 6]
        return "in_channels 2/4/6"

    _criterion(9, capfd, body)


# ---------------------------------------------------------------------------
# 10. replay reproducibility


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


def _replay_reproduces(run_dir):
    before = _tree_bytes(run_dir)
    assert _cli("replay", Path(run_dir) / "run_config.json") == 0
    return before == _tree_bytes(run_dir)


def test_criterion_10_replay_byte_identity(capfd, tmp_path):
    def body():
        data = tmp_path / "data"
        # three cases: with two, the centered one-dimensional embeddings
        # are exactly antipodal and slerp has no unique path
        assert _cli("phantom", "--out", data, "--cases", 3, "--seed", 71,
                    "--dims", 16, 16, 16, "--spacing", 0.66, 0.66, 0.66,
                    "--subdivisions", 2) == 0
        assert _replay_reproduces(data)
        # sdf overwrites the dataset run config (last writer wins)
        assert _cli("sdf", "--dataset", data) == 0
        assert _replay_reproduces(data)
        run = tmp_path / "run"
        assert _cli("train", "--dataset", data, "--out", run, "--epochs", 1,
                    "--seed", 7, "--T", 20, "--stage-channels", "4,6",
                    "--attention-factor", 2, "--heads", 1,
                    "--head-channels", 4, "--groups", 2) == 0
        assert _replay_reproduces(run)
        ckpt = run / "checkpoint.c2ck"
        synth_out = tmp_path / "synth"
        assert _cli("synth", "--checkpoint", ckpt,
                    "--case", data / "case_0000", "--out", synth_out,
                    "--n-steps", 2) == 0
        assert _replay_reproduces(synth_out)
        atrophy_out = tmp_path / "atrophy"
        assert _cli("atrophy", "--wm", data / "case_0000" / "wm.obj",
                    "--pial", data / "case_0000" / "pial.obj",
                    "--delta", 0.2, "--out", atrophy_out,
                    "--checkpoint", ckpt, "--n-steps", 2) == 0
        assert _replay_reproduces(atrophy_out)
        fit = tmp_path / "pca"
        assert _cli("pca-fit", "--dataset", data, "--k", 2, "--out", fit) == 0
        assert _replay_reproduces(fit)
        interp = tmp_path / "interp"
        assert _cli("pca-sample", "--model", fit / "model.c2pc",
                    "--case1", data / "case_0000",
                    "--case2", data / "case_0001",
                    "--phi", 0.5, "--out", interp) == 0
        assert _replay_reproduces(interp)
        mahal = tmp_path / "mahal"
        assert _cli("pca-mahalanobis", "--model", fit / "model.c2pc",
                    "--out", mahal, "--cases", data / "case_0000",
                    data / "case_0001") == 0
        assert _replay_reproduces(mahal)
        eval_out = tmp_path / "eval"
        assert _cli("eval", "--generated", data, "--reference", data,
                    "--out", eval_out) == 0
        assert _replay_reproduces(eval_out)
        sched_out = tmp_path / "sched"
        assert _cli("schedule-dump", "--T", 16, "--out", sched_out) == 0
        assert _replay_reproduces(sched_out)
        return "10 subcommands replayed"

    _criterion(10, capfd, body)
