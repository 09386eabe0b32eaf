"""Command-line front end for the synthesis pipeline.

Subcommands cover dataset generation (`phantom`), condition building
(`sdf`), shape-model workflows (`pca-fit`, `pca-sample`,
`pca-mahalanobis`), denoiser training (`train`), image synthesis
(`synth`), atrophy simulation (`atrophy`), evaluation (`eval`), and
schedule inspection (`schedule-dump`). Every run writes its fully
resolved parameters to `run_config.json` in the output directory, and
`replay` re-executes a run from that file byte-identically.

Exit codes: 0 on success, 2 on validation errors (bad arguments,
malformed or missing inputs), 1 on unexpected internal errors. The
environment variable C2V_THREADS caps the per-case worker pool.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import make_schedule, schedule_rows
from .geometry import (
    AUX_CHANNELS,
    ConditionSet,
    TriMesh,
    assd,
    build_condition_set,
    cortical_thickness,
    load_mesh,
    load_volume,
    midthickness,
    save_mesh,
    save_volume,
    simulate_atrophy,
)
from .denoiser import (
    ConditioningSpec,
    DenoiserConfig,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    synthesize,
    train,
)
from .metrics import evaluate_pair, mr_ssim
from .phantom import PhantomSpec, generate, population_specs
from .shapemodel import (
    embed,
    invert,
    load_pca,
    mahalanobis,
    outlier_filter,
    pca_fit,
    save_pca,
    slerp_sample,
)

RUN_CONFIG_NAME = "run_config.json"
EVAL_FORMAT = "eval-v1"
EVAL_COLUMNS = ("case", "psnr", "ssim", "mr_ssim", "assd_white", "assd_pial")
CONDITION_FILES = ("s_c", "s_p", "s_w", "edge", "ribbon")


# ---------------------------------------------------------------------------
# Shared plumbing


def _worker_count(n_items: int) -> int:
    raw = os.environ.get("C2V_THREADS")
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        cap = int(raw)
        if cap < 1:
            raise ValueError(f"C2V_THREADS must be a positive integer, got {raw!r}")
    return max(1, min(cap, n_items))

def _map_cases(fn, items):
    """Ordered map over independent per-case work items.

    Results come back in input order regardless of pool size, so outputs
    never depend on the worker count.
    """
    items = list(items)
    workers = _worker_count(len(items))
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))

def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

def _json_float(x):
    # JSON has no Infinity/NaN literal; encode non-finite floats as strings.
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else repr(x)

def _csv_cell(x) -> str:
    if x is None:
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out

def _resolved_parameters(args) -> dict:
    params = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        if key in _PATH_KEYS:
            if isinstance(value, str):
                value = str(Path(value).resolve())
            elif isinstance(value, (list, tuple)):
                value = [str(Path(v).resolve()) for v in value
                         if isinstance(v, str)] or list(value)
        params[key] = value
    return params

def _write_run_config(directory, args):
    _dump_json(Path(directory) / RUN_CONFIG_NAME, {
        "format": "run-config-v1",
        "version": __version__,
        "subcommand": args.command,
        "parameters": _resolved_parameters(args),
    })

def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

def _case_dirs(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(f"{root} is not a directory")
    cases = sorted(p for p in root.iterdir()
                   if p.is_dir() and p.name.startswith("case_"))
    if not cases:
        raise ValueError(f"no case_* directories under {root}")
    return cases

def _load_mesh_pair(case):
    """(pial, white) meshes from a case directory."""
    case = Path(case)
    paths = case / "pial.obj", case / "wm.obj"
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"missing mesh {p}")
    return load_mesh(paths[0]), load_mesh(paths[1])

def _load_condition(case, active_aux) -> ConditionSet:
    case = Path(case)
    vols = {}
    for name in CONDITION_FILES:
        path = case / f"{name}.c2vx"
        if not path.is_file():
            raise FileNotFoundError(
                f"missing condition volume {path}; run the sdf subcommand first")
        vols[name] = load_volume(path)
    return ConditionSet(vols["s_c"], vols["s_p"], vols["s_w"],
                        vols["edge"], vols["ribbon"], active_aux)

def _shape_sample(case) -> TriMesh:
    """Midthickness surface with the thickness map attached."""
    m_p, m_w = _load_mesh_pair(case)
    mid = midthickness(m_p, m_w)
    return TriMesh(mid.vertices, mid.faces, cortical_thickness(m_p, m_w))

def _centered_origin(dims, spacing):
    return tuple(-(d - 1) * s / 2.0 for d, s in zip(dims, spacing))

def _grid_for_case(args, case):
    """Grid parameters from flags, falling back to the case image volume."""
    if args.dims is not None and args.spacing is not None:
        dims = tuple(args.dims)
        spacing = tuple(args.spacing)
        origin = tuple(args.origin) if args.origin is not None \
            else _centered_origin(dims, spacing)
        return dims, spacing, origin
    image = Path(case) / "image.c2vx"
    if not image.is_file():
        raise ValueError(
            f"no grid source for {case}: pass --dims/--spacing or provide image.c2vx")
    vol = load_volume(image)
    return vol.dims, vol.spacing, vol.origin

def _parse_csv_ints(text: str, flag: str):
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ValueError(f"{flag} expects comma-separated integers, got {text!r}")

def _parse_active_aux(text: str):
    if text.strip() == "":
        return ()
    names = tuple(part.strip() for part in text.split(","))
    # canonical order regardless of how the flag lists them
    ordered = tuple(a for a in AUX_CHANNELS if a in names)
    unknown = set(names) - set(AUX_CHANNELS)
    if unknown:
        raise ValueError(
            f"unknown auxiliary channels {sorted(unknown)}; valid: {AUX_CHANNELS}")
    return ordered


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args) -> int:
    out = _out_dir(args)
    base = PhantomSpec(
        inner_radius=args.inner_radius,
        outer_radius=args.outer_radius,
        bump_amplitude=args.bump_amplitude,
        thickness_amplitude=args.thickness_amplitude,
        noise_sigma=args.noise_sigma,
        bias_amplitude=args.bias_amplitude,
        bias_wavelength=args.bias_wavelength,
        dims=tuple(args.dims),
        spacing=tuple(args.spacing),
        subdivisions=args.subdivisions,
        seed=args.seed,
    )
    specs = population_specs(base, args.cases)

    def build(item):
        index, spec = item
        case = out / f"case_{index:04d}"
        case.mkdir(exist_ok=True)
        m_w, m_p, image = generate(spec)
        save_mesh(case / "wm.obj", m_w)
        save_mesh(case / "pial.obj", m_p)
        save_volume(case / "image.c2vx", image)
        _dump_json(case / "spec.json", spec.to_dict())
        return case.name

    names = _map_cases(build, enumerate(specs))
    _write_run_config(out, args)
    print(f"wrote {len(names)} cases under {out}")
    return 0


# ---------------------------------------------------------------------------
# sdf


def cmd_sdf(args) -> int:
    if (args.case is None) == (args.dataset is None):
        raise ValueError("pass exactly one of --case or --dataset")
    cases = [Path(args.case)] if args.case else _case_dirs(args.dataset)

    def build(case):
        m_p, m_w = _load_mesh_pair(case)
        dims, spacing, origin = _grid_for_case(args, case)
        cond = build_condition_set(m_p, m_w, dims, spacing, origin, tau=args.tau)
        for name in CONDITION_FILES:
            save_volume(case / f"{name}.c2vx", cond.volume(name))
        return case.name

    names = _map_cases(build, cases)
    root = Path(args.case) if args.case else Path(args.dataset)
    _write_run_config(root, args)
    print(f"wrote condition volumes for {len(names)} case(s)")
    return 0


# ---------------------------------------------------------------------------
# shape model


def cmd_pca_fit(args) -> int:
    out = _out_dir(args)
    cases = _case_dirs(args.dataset)
    samples = _map_cases(_shape_sample, cases)
    model = pca_fit(samples, args.k)
    dropped = []
    if args.outlier_threshold is not None:
        retained, dropped = outlier_filter(model, samples, args.outlier_threshold)
        if dropped:
            model = pca_fit(retained, args.k)
    save_pca(out / "model.c2pc", model)
    ratio = model.explained_variance_ratio
    _dump_json(out / "pca_report.json", {
        "n_cases": len(cases),
        "n_dropped": len(dropped),
        "dropped_cases": [cases[i].name for i in dropped],
        "k": model.k,
        "explained_variance_ratio":
            None if ratio is None else [float(r) for r in ratio],
        "variances": [float(v) for v in model.variances],
    })
    _write_run_config(out, args)
    if ratio is not None:
        print(f"model retains {100.0 * float(np.sum(ratio)):.2f}% of population "
              f"variance with {model.k} components")
    return 0

def cmd_pca_sample(args) -> int:
    out = _out_dir(args)
    model = load_pca(args.model)
    e1 = embed(model, _shape_sample(args.case1))
    e2 = embed(model, _shape_sample(args.case2))
    e = slerp_sample(e1, e2, args.phi, symmetric_radius=args.symmetric_radius)
    mesh = invert(model, e)
    save_mesh(out / "midthickness.obj", mesh)
    _dump_json(out / "sample_report.json", {
        "phi": args.phi,
        "symmetric_radius": args.symmetric_radius,
        "scores": [float(v) for v in e.e],
        "mahalanobis": _json_float(mahalanobis(model, e)),
    })
    _write_run_config(out, args)
    return 0

def cmd_pca_mahalanobis(args) -> int:
    out = _out_dir(args)
    model = load_pca(args.model)
    rows = []
    for case in [Path(c) for c in args.cases]:
        dist = mahalanobis(model, embed(model, _shape_sample(case)))
        rows.append({"case": case.name, "mahalanobis": _json_float(dist)})
        print(f"{case.name} {dist:.6f}")
    _dump_json(out / "mahalanobis.json", {"cases": rows})
    _write_run_config(out, args)
    return 0


# ---------------------------------------------------------------------------
# train


def _load_dataset(cases, active_aux):
    def load(case):
        cond = _load_condition(case, active_aux)
        image = Path(case) / "image.c2vx"
        if not image.is_file():
            raise FileNotFoundError(f"missing target volume {image}")
        return cond, load_volume(image)
    return _map_cases(load, cases)

def cmd_train(args) -> int:
    out = _out_dir(args)
    cases = _case_dirs(args.dataset)
    if not 0 <= args.val_cases < len(cases):
        raise ValueError(
            f"--val-cases must leave at least one training case "
            f"(got {args.val_cases} of {len(cases)})")
    train_cases = cases[:len(cases) - args.val_cases]
    val_cases = cases[len(cases) - args.val_cases:]

    state = None
    if args.resume is not None:
        state = load_checkpoint(args.resume)
        cond_spec = state.cond_spec
        dcfg = state.net.config
    else:
        active_aux = _parse_active_aux(args.active_aux)
        probe = load_volume(train_cases[0] / "image.c2vx")
        dims = probe.dims
        if len(set(dims)) != 1:
            raise ValueError(f"training grid must be cubic, got dims {dims}")
        cond_spec = ConditioningSpec.for_grid(probe.spacing, active_aux)
        dcfg = DenoiserConfig(
            in_channels=cond_spec.in_channels,
            stage_channels=_parse_csv_ints(args.stage_channels, "--stage-channels"),
            attention_at_factor=args.attention_factor,
            attention_heads=args.heads,
            attention_head_channels=args.head_channels,
            groups=args.groups,
            base_resolution=dims[0],
        )
    tcfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        plateau_factor=args.plateau_factor,
        batch_size=args.batch_size,
        ema_rate=args.ema_rate,
        T=args.T,
        seed=args.seed,
    )

    dataset = _load_dataset(train_cases, cond_spec.active_aux)
    val_dataset = _load_dataset(val_cases, cond_spec.active_aux) if val_cases else None

    def report(s):
        line = f"epoch {s.epoch}/{tcfg.epochs} loss {s.loss_curve[-1]:.6f}"
        if s.val_curve:
            line += f" val {s.val_curve[-1]:.6f}"
        print(line + f" lr {s.lr:g}", flush=True)

    state = train(dataset, dcfg, tcfg, cond_spec=cond_spec,
                  val_dataset=val_dataset, state=state, progress=report)

    save_checkpoint(out / "checkpoint.c2ck", state)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["epoch", "loss"] + (["val_loss"] if state.val_curve else [])
        writer.writerow(header)
        for i, loss in enumerate(state.loss_curve):
            row = [i + 1, repr(float(loss))]
            if state.val_curve:
                row.append(repr(float(state.val_curve[i])))
            writer.writerow(row)
    _write_run_config(out, args)
    print(f"checkpoint at step {state.step} written to {out / 'checkpoint.c2ck'}")
    return 0


# ---------------------------------------------------------------------------
# synth


def _external_grid(args, cond_spec, base_resolution):
    dims = tuple(args.dims) if args.dims is not None \
        else (base_resolution,) * 3
    if args.spacing is not None:
        spacing = tuple(args.spacing)
    else:
        # invert the clip-radius convention used when training grids
        # defined the conditioning
        s = cond_spec.sdf_clip / 4.0
        spacing = (s, s, s)
    origin = tuple(args.origin) if args.origin is not None \
        else _centered_origin(dims, spacing)
    return dims, spacing, origin

def _synth_condition(args, state) -> ConditionSet:
    spec = state.cond_spec
    base = state.net.config.base_resolution
    if args.case is not None:
        cond = _load_condition(args.case, spec.active_aux)
    else:
        m_p, m_w = load_mesh(args.pial), load_mesh(args.wm)
        dims, spacing, origin = _external_grid(args, spec, base)
        cond = build_condition_set(m_p, m_w, dims, spacing, origin,
                                   tau=args.tau, active_aux=spec.active_aux)
    if any(d != base for d in cond.s_c.dims):
        raise ValueError(
            f"resolution mismatch: checkpoint expects {base}^3 grids, "
            f"condition has dims {cond.s_c.dims}")
    return cond

def cmd_synth(args) -> int:
    if (args.case is None) == (args.wm is None or args.pial is None):
        raise ValueError("pass either --case or both --wm and --pial")
    out = _out_dir(args)
    state = load_checkpoint(args.checkpoint)
    cond = _synth_condition(args, state)
    image = synthesize(state, cond, n_steps=args.n_steps,
                       use_ema=not args.no_ema)
    save_volume(out / "image.c2vx", image)
    _dump_json(out / "provenance.json", {
        "condition_digest": cond.content_digest(),
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "checkpoint_digest": _file_digest(args.checkpoint),
        "n_steps": args.n_steps,
        "seed": args.seed,
        "ema": not args.no_ema,
    })
    _write_run_config(out, args)
    print(f"synthesized volume written to {out / 'image.c2vx'}")
    return 0


# ---------------------------------------------------------------------------
# atrophy


def cmd_atrophy(args) -> int:
    out = _out_dir(args)
    m_p, m_w = load_mesh(args.pial), load_mesh(args.wm)
    mask = None
    if args.region_mask is not None:
        raw = np.loadtxt(args.region_mask)
        flags = np.atleast_1d(raw)
        if flags.shape != (len(m_p.vertices),):
            raise ValueError(
                f"region mask has {flags.shape[0] if flags.ndim == 1 else 'bad'} "
                f"entries for {len(m_p.vertices)} vertices")
        if not np.all(np.isin(flags, (0.0, 1.0))):
            raise ValueError("region mask entries must be 0 or 1")
        mask = flags.astype(bool)

    deformed = simulate_atrophy(m_p, m_w, args.delta,
                                region_mask=mask, step=args.step)
    save_mesh(out / "wm.obj", m_w)
    save_mesh(out / "pial.obj", deformed)

    before = cortical_thickness(m_p, m_w)
    after = cortical_thickness(deformed, m_w)
    moved = mask if mask is not None else np.ones(len(before), dtype=bool)
    _dump_json(out / "atrophy_report.json", {
        "delta": args.delta,
        "mean_thinning_masked": float(np.mean(before[moved] - after[moved])),
        "max_thickness_change_unmasked":
            0.0 if mask is None or np.all(mask)
            else float(np.max(np.abs(before[~moved] - after[~moved]))),
    })

    if args.checkpoint is not None:
        state = load_checkpoint(args.checkpoint)
        spec = state.cond_spec
        base = state.net.config.base_resolution
        dims, spacing, origin = _external_grid(args, spec, base)
        cond = build_condition_set(deformed, m_w, dims, spacing, origin,
                                   tau=args.tau, active_aux=spec.active_aux)
        if any(d != base for d in cond.s_c.dims):
            raise ValueError(
                f"resolution mismatch: checkpoint expects {base}^3 grids, "
                f"condition has dims {cond.s_c.dims}")
        image = synthesize(state, cond, n_steps=args.n_steps)
        save_volume(out / "image.c2vx", image)
        _dump_json(out / "provenance.json", {
            "condition_digest": cond.content_digest(),
            "checkpoint": str(Path(args.checkpoint).resolve()),
            "checkpoint_digest": _file_digest(args.checkpoint),
            "n_steps": args.n_steps,
            "seed": args.seed,
            "ema": True,
        })
    _write_run_config(out, args)
    print(f"deformed pial mesh written to {out / 'pial.obj'}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _volume_cases(root) -> dict:
    """Map case name -> (volume path, case dir or None)."""
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(f"{root} is not a directory")
    found = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        image = sub / "image.c2vx"
        if image.is_file():
            found[sub.name] = (image, sub)
    if not found:
        for path in sorted(root.glob("*.c2vx")):
            found[path.stem] = (path, None)
    if not found:
        raise ValueError(f"no volumes found under {root}")
    return found

def _case_assd(gen_dir, ref_dir, name: str, seed: int):
    if gen_dir is None or ref_dir is None:
        return None
    a, b = gen_dir / f"{name}.obj", ref_dir / f"{name}.obj"
    if not (a.is_file() and b.is_file()):
        return None
    return assd(load_mesh(a), load_mesh(b), seed=seed)

def cmd_eval(args) -> int:
    out = _out_dir(args)
    generated = _volume_cases(args.generated)
    reference = _volume_cases(args.reference)
    names = sorted(set(generated) & set(reference))
    if not names:
        raise ValueError("generated and reference directories share no case names")

    pool = None
    if args.pool is not None:
        pool = [load_volume(path) for path, _ in _volume_cases(args.pool).values()]

    def score(name):
        gen_path, gen_dir = generated[name]
        ref_path, ref_dir = reference[name]
        gen, ref = load_volume(gen_path), load_volume(ref_path)
        report = evaluate_pair(gen, ref, window=args.window)
        row = {
            "case": name,
            "psnr": report.psnr,
            "ssim": report.ssim,
            "mr_ssim": None,
            "assd_white": _case_assd(gen_dir, ref_dir, "wm", args.seed),
            "assd_pial": _case_assd(gen_dir, ref_dir, "pial", args.seed),
        }
        if pool is not None:
            row["mr_ssim"] = mr_ssim(gen, pool, min(args.n_refs, len(pool)),
                                     seed=args.seed, window=args.window)
        return row

    rows = _map_cases(score, names)
    _dump_json(out / "report.json", {
        "format": EVAL_FORMAT,
        "n_cases": len(rows),
        "cases": [{k: (_json_float(v) if k != "case" else v)
                   for k, v in row.items()} for row in rows],
    })
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_COLUMNS)
        for row in rows:
            writer.writerow([_csv_cell(row[c]) for c in EVAL_COLUMNS])
    _write_run_config(out, args)
    for row in rows:
        ssim_txt = f"{row['ssim']:.4f}"
        print(f"{row['case']} psnr {row['psnr']:.2f} ssim {ssim_txt}")
    return 0


# ---------------------------------------------------------------------------
# schedule-dump, replay


def cmd_schedule_dump(args) -> int:
    out = _out_dir(args)
    sched = make_schedule(args.T)
    with open(out / "schedule.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "alpha", "delta", "delta_cond",
                         "c_xt", "c_st", "c_ft", "delta_tilde"])
        for row in schedule_rows(sched):
            writer.writerow([_csv_cell(v) for v in row])
    _write_run_config(out, args)
    print(f"schedule for T={args.T} written to {out / 'schedule.csv'}")
    return 0

def cmd_replay(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    for key in ("subcommand", "parameters"):
        if key not in doc:
            raise ValueError(f"{args.config}: missing {key!r}")
    name = doc["subcommand"]
    if name == "replay" or name not in _COMMANDS:
        raise ValueError(f"cannot replay subcommand {name!r}")
    replayed = argparse.Namespace(command=name, **doc["parameters"])
    return _COMMANDS[name](replayed)


# ---------------------------------------------------------------------------
# Parser assembly


_PATH_KEYS = frozenset((
    "out", "case", "dataset", "model", "case1", "case2", "cases", "resume",
    "checkpoint", "wm", "pial", "region_mask", "generated", "reference",
    "pool", "config",
))

_COMMANDS = {
    "phantom": cmd_phantom,
    "sdf": cmd_sdf,
    "pca-fit": cmd_pca_fit,
    "pca-sample": cmd_pca_sample,
    "pca-mahalanobis": cmd_pca_mahalanobis,
    "train": cmd_train,
    "synth": cmd_synth,
    "atrophy": cmd_atrophy,
    "eval": cmd_eval,
    "schedule-dump": cmd_schedule_dump,
    "replay": cmd_replay,
}


def _add_seed(parser):
    parser.add_argument("--seed", type=int, default=0,
                        help="master seed for all named randomness streams")

def _add_grid_flags(parser):
    parser.add_argument("--dims", type=int, nargs=3, default=None,
                        metavar=("H", "W", "D"), help="grid dimensions")
    parser.add_argument("--spacing", type=float, nargs=3, default=None,
                        metavar=("SX", "SY", "SZ"), help="voxel spacing")
    parser.add_argument("--origin", type=float, nargs=3, default=None,
                        metavar=("OX", "OY", "OZ"),
                        help="world position of voxel (0,0,0); default centers the grid")
    parser.add_argument("--tau", type=float, default=None,
                        help="edge-band half width; default half the smallest spacing")

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxbridge",
        description="Shape-conditioned volume synthesis pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic two-surface dataset")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--cases", type=int, default=1, help="number of cases")
    p.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    p.add_argument("--spacing", type=float, nargs=3, default=[0.33, 0.33, 0.33])
    p.add_argument("--inner-radius", type=float, default=3.2)
    p.add_argument("--outer-radius", type=float, default=4.2)
    p.add_argument("--bump-amplitude", type=float, default=0.25)
    p.add_argument("--thickness-amplitude", type=float, default=0.15)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    p.add_argument("--bias-amplitude", type=float, default=0.1)
    p.add_argument("--bias-wavelength", type=float, default=12.0)
    p.add_argument("--subdivisions", type=int, default=3)
    _add_seed(p)

    p = sub.add_parser("sdf", help="build condition volumes from mesh pairs")
    p.add_argument("--case", default=None, help="single case directory")
    p.add_argument("--dataset", default=None,
                   help="dataset root; processes every case_* directory")
    _add_grid_flags(p)
    _add_seed(p)

    p = sub.add_parser("pca-fit", help="fit the population shape model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, required=True, help="latent dimensionality")
    p.add_argument("--out", required=True)
    p.add_argument("--outlier-threshold", type=float, default=None,
                   help="drop samples with any |score| above this, then refit")
    _add_seed(p)

    p = sub.add_parser("pca-sample",
                       help="interpolate two cases on the latent sphere")
    p.add_argument("--model", required=True, help="fitted .c2pc file")
    p.add_argument("--case1", required=True)
    p.add_argument("--case2", required=True)
    p.add_argument("--phi", type=float, required=True,
                   help="interpolation parameter in [0, 1]")
    p.add_argument("--symmetric-radius", action="store_true",
                   help="blend the endpoint radii instead of keeping the first")
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("pca-mahalanobis",
                       help="latent distances of cases under a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cases", nargs="+", required=True, help="case directories")
    _add_seed(p)

    p = sub.add_parser("train", help="train the denoiser on a prepared dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--ema-rate", type=float, default=0.995)
    p.add_argument("--T", type=int, default=1000, help="diffusion step count")
    p.add_argument("--plateau-factor", type=float, default=0.5)
    p.add_argument("--stage-channels", default="16,32,48,64",
                   help="comma-separated channel widths per resolution stage")
    p.add_argument("--attention-factor", type=int, default=8,
                   help="downsampling factor of the stage that gets attention")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--head-channels", type=int, default=16)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--active-aux", default=",".join(AUX_CHANNELS),
                   help="comma-separated auxiliary condition channels")
    p.add_argument("--val-cases", type=int, default=0,
                   help="hold out the last N cases for validation")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_seed(p)

    p = sub.add_parser("synth", help="synthesize a volume from a condition")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--case", default=None,
                   help="case directory with prepared condition volumes")
    p.add_argument("--wm", default=None, help="external white-surface mesh")
    p.add_argument("--pial", default=None, help="external pial-surface mesh")
    p.add_argument("--n-steps", type=int, default=10,
                   help="denoiser evaluations along the reverse path")
    p.add_argument("--no-ema", action="store_true",
                   help="sample with the raw parameters instead of the EMA set")
    _add_grid_flags(p)
    _add_seed(p)

    p = sub.add_parser("atrophy", help="thin the cortex and optionally resynthesize")
    p.add_argument("--wm", required=True)
    p.add_argument("--pial", required=True)
    p.add_argument("--delta", type=float, required=True,
                   help="requested thickness reduction")
    p.add_argument("--out", required=True)
    p.add_argument("--region-mask", default=None,
                   help="text file with one 0/1 flag per pial vertex")
    p.add_argument("--step", type=float, default=0.05,
                   help="per-iteration inward displacement")
    p.add_argument("--checkpoint", default=None,
                   help="synthesize the post-atrophy image with this model")
    p.add_argument("--n-steps", type=int, default=10)
    _add_grid_flags(p)
    _add_seed(p)

    p = sub.add_parser("eval", help="score generated volumes against references")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pool", default=None,
                   help="reference pool directory for MR-SSIM")
    p.add_argument("--n-refs", type=int, default=10,
                   help="references drawn per case for MR-SSIM")
    p.add_argument("--window", type=int, default=7, help="SSIM window size")
    _add_seed(p)

    p = sub.add_parser("schedule-dump", help="export the bridge schedule as CSV")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("replay", help="re-execute a run from its run_config.json")
    p.add_argument("config", help="path to a run_config.json")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # pragma: no cover - defensive
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
