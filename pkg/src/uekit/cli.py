"""Command-line surface: pretrain, craft, eval, ablate, diagnose, export-features.

Every command resolves its configuration (defaults < --config file < flags),
validates it, writes its artifacts under --out together with a manifest, and
exits 0 only if all outputs were written and the built-in invariant checks
passed. --dry-run validates and prints the resolved configuration without side
effects.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import __version__
from .artifacts import (
    load_model,
    load_perturbation,
    save_bank,
    save_deltas,
    save_model,
)
from .crafting import CraftConfig, CraftLog, CurriculumSchedule, craft, parse_epsilon
from .datasets import load_dataset, make_disjoint_prior_split, make_glyphs, mix_poison
from .defenses import DefenseSpec
from .determinism import enable_deterministic_mode
from .emn import EmnConfig, emn_craft
from .evaluation import VictimSpec, evaluate_unlearnability, export_features, run_prior_ablation
from .manifests import Manifest, output_lock
from .models import UpdateTrace, build_model, normalize_trace, pretrain
from .reporting import (
    render_table,
    save_ablation_png,
    save_bank_grid_png,
    save_craft_log_png,
    save_curves_png,
    save_trace_png,
)


class CliError(RuntimeError):
    pass


def _parse_options(blob: str) -> dict:
    options = {}
    for part in blob.split(","):
        if not part:
            continue
        if "=" not in part:
            raise CliError(f"bad option {part!r} (expected key=value)")
        key, value = part.split("=", 1)
        options[key.strip()] = value.strip()
    return options


def parse_data_spec(spec: str):
    """Resolve a data spec string to a SplitDataset.

    Forms: 'glyphs', 'glyphs-prior', 'glyphs-downstream' with an optional
    ':k=10,train=100,test=40,seed=0,prior=5,downstream=5,split_seed=0' suffix,
    or 'cifar10:<root>'.
    """
    name, _, rest = spec.partition(":")
    if name == "cifar10":
        if not rest:
            raise CliError("cifar10 spec needs a root directory: cifar10:<root>")
        return load_dataset("cifar10", rest)
    if name not in ("glyphs", "glyphs-prior", "glyphs-downstream", "synthetic-glyphs"):
        raise CliError(f"unknown data spec {spec!r}")
    opts = _parse_options(rest) if rest else {}
    k = int(opts.get("k", 10))
    full = make_glyphs(
        class_count=k,
        train_per_class=int(opts.get("train", 100)),
        test_per_class=int(opts.get("test", 40)),
        seed=int(opts.get("seed", 0)),
    )
    if name in ("glyphs", "synthetic-glyphs"):
        return full
    prior_k = int(opts.get("prior", k // 2))
    down_k = int(opts.get("downstream", k - k // 2))
    prior, downstream = make_disjoint_prior_split(
        full, prior_k, down_k, seed=int(opts.get("split_seed", 0))
    )
    return prior if name == "glyphs-prior" else downstream


def parse_victim_spec(spec: str, args) -> VictimSpec:
    kwargs = dict(
        arch_id=args.arch,
        epochs=args.epochs,
        lr=args.lr,
        optimizer=args.optimizer,
        batch_size=args.batch_size,
    )
    if spec == "random":
        return VictimSpec(pretrained=None, **kwargs)
    kind, _, path = spec.partition(":")
    if kind != "pretrained" or not path:
        raise CliError(f"victim spec must be 'random' or 'pretrained:<checkpoint>', got {spec!r}")
    if not Path(path).exists():
        raise CliError(f"victim checkpoint not found: {path}")
    state = load_model(path)
    return VictimSpec(arch_id=state.arch_id, pretrained=state, **{k: v for k, v in kwargs.items() if k != "arch_id"})


def parse_defense_spec(spec: str) -> DefenseSpec | None:
    if spec in ("", "none"):
        return None
    kind, _, value = spec.partition(":")
    if kind == "jpeg":
        return DefenseSpec(kind="jpeg", quality=int(value or 75))
    if kind == "cutout":
        return DefenseSpec(kind="cutout", mask_size=int(value or 8))
    if kind == "cutmix":
        return DefenseSpec(kind="cutmix", mask_size=int(value or 8))
    if kind == "mixup":
        return DefenseSpec(kind="mixup", beta_param=float(value or 1.0))
    raise CliError(f"unknown defense spec {spec!r}")


def _parse_stages(blob: str) -> tuple[int, int, int]:
    parts = blob.split(",")
    if len(parts) != 3:
        raise CliError(f"--stages expects E1,E2,E3, got {blob!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved_config(args) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in vars(args).items() if k not in skip and not callable(v)}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    data = parse_data_spec(args.data)
    if args.dry_run:
        print(json.dumps(_resolved_config(args), indent=2, default=str))
        return 0
    out = _prepare_out(args)
    with output_lock(out):
        manifest = Manifest("pretrain", _resolved_config(args), seeds=[args.seed])
        model = build_model(args.arch, data.class_count, seed=args.seed, image_shape=data.image_shape)
        state, accuracy = pretrain(
            model, data, epochs=args.epochs, lr=args.lr, seed=args.seed,
            optimizer=args.optimizer, batch_size=args.batch_size,
        )
        ckpt = out / "checkpoint.ckpt"
        save_model(state, ckpt)
        manifest.add_output(ckpt)
        manifest.write(out / "manifest.json")
    print(f"prior-test accuracy: {accuracy:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_craft(args) -> int:
    epsilon, epsilon_str = parse_epsilon(args.eps)
    data = parse_data_spec(args.data)
    if not Path(args.surrogate).exists():
        raise CliError(f"surrogate checkpoint not found: {args.surrogate}")
    if args.dry_run:
        print(json.dumps(_resolved_config(args), indent=2, default=str))
        return 0
    out = _prepare_out(args)
    with output_lock(out):
        manifest = Manifest(f"craft-{args.method}", _resolved_config(args), seeds=[args.seed])
        manifest.add_input(args.surrogate)
        surrogate = load_model(args.surrogate)
        if args.method == "bait":
            config = CraftConfig(
                alpha=args.alpha, beta=args.beta, unroll_steps=args.unroll,
                epsilon=epsilon, epsilon_str=epsilon_str, batch_size=args.batch_size,
                seed=args.seed, second_order=not args.first_order, bank_mode=args.bank_mode,
                bank_momentum=args.bank_momentum, generator_width=args.gen_width,
            )
            schedule = CurriculumSchedule(_parse_stages(args.stages))
            result = craft(config, surrogate, schedule, data)
            bank_path = out / "bank.bank"
            log_path = out / "craft_log.csv"
            save_bank(result.bank, bank_path)
            result.log.to_csv(log_path)
            save_craft_log_png(result.log, out / "craft_log.png")
            save_bank_grid_png(result.bank, out / "bank_grid.png")
            for path in (bank_path, log_path, out / "craft_log.png", out / "bank_grid.png"):
                manifest.add_output(path)
            last = result.log.rows[-1]
            print(
                f"crafted bank: {bank_path}\n"
                f"final surrogate: perturbed-train {last.acc_perturbed_train:.3f}, "
                f"clean-train {last.acc_clean_train:.3f}"
            )
        else:  # emn
            config = EmnConfig(
                epsilon=epsilon, epsilon_str=epsilon_str, pgd_steps=args.pgd_steps,
                pgd_step_size=args.pgd_step_size, alternations=args.alternations,
                stop_accuracy=args.stop_acc, train_steps=args.train_steps,
                train_lr=args.train_lr, batch_size=args.batch_size, seed=args.seed,
            )
            result = emn_craft(data, surrogate, config)
            delta_path = out / "deltas.deltas"
            save_deltas(result.deltas, delta_path)
            manifest.add_output(delta_path)
            print(
                f"crafted per-sample deltas: {delta_path}\n"
                f"alternations run: {len(result.history)}, "
                f"final perturbed-train accuracy: {result.history[-1]:.3f}"
            )
        manifest.write(out / "manifest.json")
    return 0


def cmd_eval(args) -> int:
    data = parse_data_spec(args.data)
    victim = parse_victim_spec(args.victim, args)
    defense = parse_defense_spec(args.defense)
    perturbation = None
    if args.perturbation:
        if not Path(args.perturbation).exists():
            raise CliError(f"perturbation artifact not found: {args.perturbation}")
        perturbation = load_perturbation(args.perturbation)
    if not 0.0 <= args.ratio <= 1.0:
        raise CliError(f"--ratio must be in [0, 1], got {args.ratio}")
    if args.dry_run:
        print(json.dumps(_resolved_config(args), indent=2, default=str))
        return 0
    out = _prepare_out(args)
    with output_lock(out):
        manifest = Manifest("eval", _resolved_config(args),
                            seeds=list(range(args.seed, args.seed + args.repeats)))
        if args.perturbation:
            manifest.add_input(args.perturbation)
        if args.victim.startswith("pretrained:"):
            manifest.add_input(args.victim.partition(":")[2])
        report = evaluate_unlearnability(
            perturbation, victim, data, defense=defense, ratio=args.ratio,
            repeats=args.repeats, seed=args.seed,
        )
        report_path = out / "report.json"
        with open(report_path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        curves_csv = out / "curves.csv"
        report.write_curves_csv(curves_csv)
        curves_png = out / "curves.png"
        save_curves_png(report.train_curves, report.test_curves, curves_png,
                        title=f"victim={args.victim} defense={report.defense} ratio={args.ratio}")
        table = render_table(
            ["metric", "mean", "sd"],
            [
                ["clean-test accuracy", f"{report.clean_test_accuracy:.4f}", f"{report.clean_test_sd:.4f}"],
                ["perturbed-train accuracy", f"{report.perturbed_train_accuracy:.4f}",
                 f"{report.perturbed_train_sd:.4f}"],
            ],
        )
        summary_path = out / "summary.txt"
        summary_path.write_text(table)
        if perturbation is not None:
            poison_csv = out / "poison_manifest.csv"
            mix_poison(data, perturbation, args.ratio, seed=args.seed).write_manifest_csv(poison_csv)
            manifest.add_output(poison_csv)
        for path in (report_path, curves_csv, curves_png, summary_path):
            manifest.add_output(path)
        manifest.write(out / "manifest.json")
    print(table, end="")
    return 0


def cmd_ablate(args) -> int:
    data = parse_data_spec(args.data)
    victim = parse_victim_spec(args.victim, args)
    if victim.pretrained is None:
        raise CliError("ablate requires a pretrained victim")
    mode = {"progressive": "progressive_replace", "freeze-each": "freeze_each"}.get(args.mode)
    if mode is None:
        raise CliError(f"--mode must be 'progressive' or 'freeze-each', got {args.mode!r}")
    if not Path(args.perturbation).exists():
        raise CliError(f"perturbation artifact not found: {args.perturbation}")
    perturbation = load_perturbation(args.perturbation)
    if args.dry_run:
        print(json.dumps(_resolved_config(args), indent=2, default=str))
        return 0
    out = _prepare_out(args)
    with output_lock(out):
        manifest = Manifest("ablate", _resolved_config(args),
                            seeds=list(range(args.seed, args.seed + args.repeats)))
        manifest.add_input(args.perturbation)
        manifest.add_input(args.victim.partition(":")[2])
        cells = run_prior_ablation(
            perturbation, data, victim, mode, repeats=args.repeats, seed=args.seed
        )
        rows = [[label, f"{r.clean_test_accuracy:.4f}", f"{r.perturbed_train_accuracy:.4f}"]
                for label, r in cells]
        table = render_table(["cell", "clean-test", "perturbed-train"], rows)
        csv_path = out / "ablation.csv"
        with open(csv_path, "w") as fh:
            fh.write("cell,clean_test_accuracy,perturbed_train_accuracy\n")
            for row in rows:
                fh.write(",".join(row) + "\n")
        png_path = out / "ablation.png"
        save_ablation_png([label for label, _ in cells],
                          [r.clean_test_accuracy for _, r in cells], png_path)
        (out / "summary.txt").write_text(table)
        for path in (csv_path, png_path, out / "summary.txt"):
            manifest.add_output(path)
        manifest.write(out / "manifest.json")
    print(table, end="")
    return 0


def cmd_diagnose(args) -> int:
    if not args.trace and not args.log:
        raise CliError("diagnose needs --trace and/or --log")
    if args.dry_run:
        print(json.dumps(_resolved_config(args), indent=2, default=str))
        return 0
    out = _prepare_out(args)
    with output_lock(out):
        manifest = Manifest("diagnose", _resolved_config(args))
        if args.trace:
            if not Path(args.trace).exists():
                raise CliError(f"trace file not found: {args.trace}")
            manifest.add_input(args.trace)
            trace = normalize_trace(UpdateTrace.from_csv(args.trace))
            if trace.normalized.min() < 0 or trace.normalized.max() > 1 + 1e-9:
                raise CliError("normalized trace escaped [0, 1]; refusing to plot")
            norm_csv = out / "trace_normalized.csv"
            trace.to_csv(norm_csv)
            trace_png = out / "trace.png"
            save_trace_png(trace, trace_png)
            manifest.add_output(norm_csv)
            manifest.add_output(trace_png)
            print(f"trace figure: {trace_png}")
        if args.log:
            if not Path(args.log).exists():
                raise CliError(f"craft log not found: {args.log}")
            manifest.add_input(args.log)
            log = CraftLog.from_csv(args.log)
            log_png = out / "craft_curves.png"
            save_craft_log_png(log, log_png)
            manifest.add_output(log_png)
            print(f"craft-curve figure: {log_png}")
        manifest.write(out / "manifest.json")
    return 0


def cmd_export_features(args) -> int:
    data = parse_data_spec(args.data)
    if not Path(args.model).exists():
        raise CliError(f"model checkpoint not found: {args.model}")
    state = load_model(args.model)
    if args.dry_run:
        print(json.dumps(_resolved_config(args), indent=2, default=str))
        return 0
    out = _prepare_out(args)
    with output_lock(out):
        manifest = Manifest("export-features", _resolved_config(args))
        manifest.add_input(args.model)
        images = data.test_images if args.split == "test" else data.train_images
        labels = data.test_labels if args.split == "test" else data.train_labels
        features_path = out / "features.csv"
        export_features(state, images, labels, features_path)
        manifest.add_output(features_path)
        manifest.write(out / "manifest.json")
    print(f"features: {features_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sub, with_victim_params=False):
    sub.add_argument("--out", default="runs/out", help="output directory")
    sub.add_argument("--config", default=None, help="YAML config file (flags override it)")
    sub.add_argument("--dry-run", action="store_true", help="validate config without side effects")
    sub.add_argument("--deterministic", action="store_true",
                     help="single-threaded deterministic kernels (slower)")
    if with_victim_params:
        sub.add_argument("--arch", default="rn-mini")
        sub.add_argument("--epochs", type=int, default=20)
        sub.add_argument("--lr", type=float, default=1e-3)
        sub.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
        sub.add_argument("--batch-size", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uekit",
        description="Craft and evaluate unlearnable examples against pretrained victims.",
    )
    parser.add_argument("--version", action="version", version=f"uekit {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("pretrain", help="fabricate a pretraining prior")
    _add_common(p, with_victim_params=True)
    p.add_argument("--data", required=True, help="e.g. glyphs-prior")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("craft", help="craft perturbations (bait or emn)")
    _add_common(p)
    p.add_argument("--method", choices=["bait", "emn"], default="bait")
    p.add_argument("--surrogate", required=True, help="surrogate checkpoint path")
    p.add_argument("--data", required=True, help="e.g. glyphs-downstream")
    p.add_argument("--eps", default="8/255", help="L-inf budget, exact rational or float")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64)
    # bait
    p.add_argument("--stages", default="30,30,30", help="curriculum stage epochs E1,E2,E3")
    p.add_argument("--alpha", type=float, default=0.1, help="surrogate/inner step size")
    p.add_argument("--beta", type=float, default=1e-3, help="generator/bank optimizer lr")
    p.add_argument("--unroll", type=int, default=1, help="inner unroll steps N")
    p.add_argument("--first-order", action="store_true",
                   help="stop gradients through the unroll")
    p.add_argument("--bank-mode", choices=["generator", "direct"], default="generator")
    p.add_argument("--bank-momentum", type=float, default=0.9)
    p.add_argument("--gen-width", type=int, default=16)
    # emn
    p.add_argument("--pgd-steps", type=int, default=4)
    p.add_argument("--pgd-step-size", type=float, default=None)
    p.add_argument("--alternations", type=int, default=8)
    p.add_argument("--stop-acc", type=float, default=0.99)
    p.add_argument("--train-steps", type=int, default=10)
    p.add_argument("--train-lr", type=float, default=0.01)
    p.set_defaults(func=cmd_craft)

    p = subs.add_parser("eval", help="evaluate unlearnability on victims")
    _add_common(p, with_victim_params=True)
    p.add_argument("--perturbation", "--bank", dest="perturbation", default=None,
                   help="bank or per-sample delta archive; omit for clean training")
    p.add_argument("--victim", default="random", help="'random' or 'pretrained:<ckpt>'")
    p.add_argument("--data", required=True)
    p.add_argument("--defense", default="none", help="none|cutout:8|cutmix:8|mixup:1.0|jpeg:50")
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("ablate", help="prior-removal and layer-freezing sweeps")
    _add_common(p, with_victim_params=True)
    p.add_argument("--mode", required=True, help="progressive | freeze-each")
    p.add_argument("--perturbation", "--bank", dest="perturbation", required=True)
    p.add_argument("--victim", required=True, help="pretrained:<ckpt>")
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("diagnose", help="render update-trace and craft-log figures")
    _add_common(p)
    p.add_argument("--trace", default=None, help="update-trace CSV")
    p.add_argument("--log", default=None, help="craft-log CSV")
    p.set_defaults(func=cmd_diagnose)

    p = subs.add_parser("export-features", help="dump penultimate features as CSV")
    _add_common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=cmd_export_features)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Pre-scan for --config and fold file values in as defaults (flags win)."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise CliError("--config needs a file path")
    path = Path(argv[idx + 1])
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    with open(path) as fh:
        loaded = yaml.safe_load(fh) or {}
    if not isinstance(loaded, dict):
        raise CliError(f"config file must be a mapping, got {type(loaded).__name__}")
    extra: list[str] = []
    for key, value in loaded.items():
        flag = "--" + key.replace("_", "-")
        if flag in argv:
            continue  # explicit flag overrides the file
        if isinstance(value, bool):
            if value:
                extra.append(flag)
        else:
            extra.extend([flag, str(value)])
    # config-derived values go first so explicit flags (parsed later) override
    return extra + argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] not in ("-h", "--help", "--version"):
            argv = [argv[0]] + _apply_config_file(parser, argv[1:])
        args = parser.parse_args(argv)
        if getattr(args, "deterministic", False):
            enable_deterministic_mode()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
