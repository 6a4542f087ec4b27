"""Command-line front end: generate / train / eval / invariance / exposure.

Every run resolves its configuration up front (defaults, then config file,
then flags), writes the resolved copy next to its outputs, and is bitwise
reproducible from that copy plus the seed. Config files are flat dotted
keys, one per line:

    seed = 0
    data.K = 25
    train.learning_rate = 0.001   # comments allowed
"""

import argparse
import os
import sys
from dataclasses import dataclass

from .data import (
    Dataset,
    GenConfig,
    generate_synthetic,
    read_dataset,
    tokenize_dataset,
    write_dataset,
)
from .errors import ConfigError, StableRankError
from .evaluation import (
    effectiveness_table,
    exposure_report,
    permutation_harness,
    write_effectiveness_csv,
)
from .layout import InvarianceMode
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .training import AdamW, TrainConfig, train

DEFAULTS = {
    "seed": 0,
    "data.n_users": 600,
    "data.n_items": 1000,
    "data.n_attr_vocab": 24,
    "data.attrs_per_item": 2,
    "data.pref_size": 6,
    "data.K": 25,
    "data.history_len": 20,
    "data.positives_per_list": 3,
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.n_layers": 2,
    "model.d_ff": 256,
    "model.rope_base": 10000.0,
    "model.max_seq_len": 256,
    "model.dtype": "float64",
    "train.steps": 500,
    "train.batch_size": 16,
    "train.learning_rate": 0.002,
    "train.warmup_fraction": 0.05,
    "train.sigma": 1.0,
    "train.mode": "full",
    "train.grad_clip_norm": 1.0,
    "train.weight_decay": 0.0,
    "train.eval_every": 50,
    "train.order_seed": None,
    "eval.mode": "all",
    "eval.permutations": 8,
    "eval.k": 5,
    "eval.split": "test",
    "io.data": None,
    "io.checkpoint": None,
    "io.resume": None,
}

MODE_CHOICES = ["standard", "pos", "attn", "full"]


def parse_value(text: str):
    """int, then float, then none/true/false sentinels, else raw string."""
    s = text.strip()
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    low = s.lower()
    if low in ("none", "null"):
        return None
    if low == "true":
        return True
    if low == "false":
        return False
    return s


def format_value(value) -> str:
    if value is None:
        return "none"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}: line {lineno}: empty key")
            if key not in DEFAULTS:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
            values[key] = parse_value(val)
    return values


@dataclass
class RunConfig:
    command: str
    values: dict
    out: str

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def gen_config(self) -> GenConfig:
        v = self.values
        return GenConfig(
            n_users=int(v["data.n_users"]),
            n_items=int(v["data.n_items"]),
            n_attr_vocab=int(v["data.n_attr_vocab"]),
            attrs_per_item=int(v["data.attrs_per_item"]),
            pref_size=int(v["data.pref_size"]),
            K=int(v["data.K"]),
            history_len=int(v["data.history_len"]),
            positives_per_list=int(v["data.positives_per_list"]),
            seed=self.seed,
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        v = self.values
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=int(v["model.d_model"]),
            n_heads=int(v["model.n_heads"]),
            n_layers=int(v["model.n_layers"]),
            d_ff=int(v["model.d_ff"]),
            rope_base=float(v["model.rope_base"]),
            max_seq_len=int(v["model.max_seq_len"]),
            dtype=str(v["model.dtype"]),
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        clip = v["train.grad_clip_norm"]
        order_seed = v["train.order_seed"]
        return TrainConfig(
            steps=int(v["train.steps"]),
            batch_size=int(v["train.batch_size"]),
            learning_rate=float(v["train.learning_rate"]),
            warmup_fraction=float(v["train.warmup_fraction"]),
            sigma=float(v["train.sigma"]),
            mode=str(v["train.mode"]),
            seed=self.seed,
            grad_clip_norm=None if clip is None else float(clip),
            weight_decay=float(v["train.weight_decay"]),
            eval_every=int(v["train.eval_every"]),
            order_seed=None if order_seed is None else int(order_seed),
        )

    def path(self, key: str) -> str | None:
        val = self.values[key]
        return None if val is None else str(val)

    def write_resolved(self) -> str:
        path = os.path.join(self.out, "config.txt")
        lines = [f"{k} = {format_value(self.values[k])}" for k in sorted(self.values)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stablerank",
        description="Order-robust listwise reranking experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat dotted-key config file")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        p.add_argument("--out", required=True, help="output directory (created if missing)")

    p_gen = sub.add_parser("generate", help="write synthetic dataset splits")
    common(p_gen)

    p_train = sub.add_parser("train", help="train a reranker checkpoint")
    common(p_train)
    p_train.add_argument("--data", help="directory holding train/val/test .jsonl splits")
    p_train.add_argument("--mode", choices=MODE_CHOICES, help="attention/position regime")
    p_train.add_argument("--steps", type=int, help="total optimizer steps")
    p_train.add_argument("--resume", help="checkpoint to continue from")

    for name, blurb in (
        ("eval", "effectiveness metrics table"),
        ("invariance", "order-robustness report"),
        ("exposure", "input-slot exposure table"),
    ):
        p = sub.add_parser(name, help=blurb)
        common(p)
        p.add_argument("--data", help="directory holding train/val/test .jsonl splits")
        p.add_argument("--checkpoint", help="model checkpoint to score with")
        mode_choices = MODE_CHOICES + ["all"] if name == "eval" else MODE_CHOICES
        p.add_argument("--mode", choices=mode_choices, help="scoring regime")
        p.add_argument("--permutations", type=int, help="presentation orders per query (>= 2)")
        p.add_argument("--k", type=int, help="cutoff for top-k metrics")
        p.add_argument("--split", choices=["train", "val", "test"], help="dataset split to score")
    return parser


FLAG_KEYS = {
    "seed": "seed",
    "mode": None,  # per-command: train.mode or eval.mode
    "steps": "train.steps",
    "permutations": "eval.permutations",
    "k": "eval.k",
    "split": "eval.split",
    "data": "io.data",
    "checkpoint": "io.checkpoint",
    "resume": "io.resume",
}


def resolve(args, parser) -> RunConfig:
    values = dict(DEFAULTS)
    if args.config:
        values.update(parse_config_file(args.config))
    for flag, key in FLAG_KEYS.items():
        if not hasattr(args, flag):
            continue
        val = getattr(args, flag)
        if val is None:
            continue
        if key is None:
            key = "train.mode" if args.command == "train" else "eval.mode"
        values[key] = val

    if args.command in ("eval", "invariance", "exposure"):
        if int(values["eval.permutations"]) < 2:
            parser.error("--permutations must be at least 2")
        if values["io.data"] is None:
            parser.error(f"{args.command} needs --data (or io.data in the config)")
        if values["io.checkpoint"] is None:
            parser.error(f"{args.command} needs --checkpoint (or io.checkpoint in the config)")
        if args.command != "eval" and values["eval.mode"] == "all":
            values["eval.mode"] = "full"
    if args.command == "train" and values["io.data"] is None:
        parser.error("train needs --data (or io.data in the config)")
    return RunConfig(command=args.command, values=values, out=args.out)


def _load_split(run: RunConfig, split: str) -> Dataset:
    return read_dataset(os.path.join(run.path("io.data"), f"{split}.jsonl"))


def _load_scoring_inputs(run: RunConfig):
    ds = _load_split(run, str(run.values["eval.split"]))
    params, _ = load_checkpoint(run.path("io.checkpoint"))
    if params.config.vocab_size != ds.vocab.size:
        raise ConfigError(
            f"checkpoint vocabulary ({params.config.vocab_size}) does not match "
            f"dataset vocabulary ({ds.vocab.size})"
        )
    return params, tokenize_dataset(ds)


def cmd_generate(run: RunConfig) -> int:
    splits = generate_synthetic(run.gen_config())
    for name, ds in zip(("train", "val", "test"), splits):
        write_dataset(os.path.join(run.out, f"{name}.jsonl"), ds)
    run.write_resolved()
    counts = ", ".join(f"{name}={len(ds.queries)}" for name, ds in zip(("train", "val", "test"), splits))
    print(f"wrote dataset splits to {run.out} ({counts})")
    return 0


def cmd_train(run: RunConfig) -> int:
    train_ds = _load_split(run, "train")
    val_ds = _load_split(run, "val")
    tcfg = run.train_config()
    mcfg = run.model_config(train_ds.vocab.size)

    resume = run.path("io.resume")
    if resume is not None:
        params, state = load_checkpoint(resume)
        if state is None:
            raise ConfigError(f"{resume} holds no optimizer state; cannot resume")
        if params.config != mcfg:
            raise ConfigError(f"{resume} was trained under a different model configuration")
        optimizer = AdamW(params, moments=state)
        start_step = int(state["step"])
    else:
        params = init_params(mcfg)
        optimizer = None
        start_step = 0

    optimizer, log = train(
        params,
        tokenize_dataset(train_ds),
        tcfg,
        val_queries=tokenize_dataset(val_ds),
        start_step=start_step,
        optimizer=optimizer,
        verbose=True,
    )
    save_checkpoint(os.path.join(run.out, "checkpoint.bin"), params, optimizer.state(tcfg.steps))
    log.write(os.path.join(run.out, "train_log.jsonl"))
    run.write_resolved()
    last_val = next((e["val_ndcg10"] for e in reversed(log.entries) if "val_ndcg10" in e), None)
    tail = f", val nDCG@10 {last_val:.4f}" if last_val is not None else ""
    print(f"trained {tcfg.steps - start_step} steps ({tcfg.mode.value} mode){tail}")
    print(f"checkpoint: {os.path.join(run.out, 'checkpoint.bin')}")
    return 0


def cmd_eval(run: RunConfig) -> int:
    params, queries = _load_scoring_inputs(run)
    mode_val = str(run.values["eval.mode"])
    modes = (
        [InvarianceMode.parse(m) for m in MODE_CHOICES]
        if mode_val == "all"
        else [InvarianceMode.parse(mode_val)]
    )
    rows = effectiveness_table(
        params,
        queries,
        modes,
        P=int(run.values["eval.permutations"]),
        seed=run.seed,
    )
    write_effectiveness_csv(os.path.join(run.out, "metrics.csv"), rows)
    run.write_resolved()
    print(f"{'mode':<10} {'HR@5':>8} {'HR@10':>8} {'nDCG@5':>8} {'nDCG@10':>8} {'tau':>8}")
    for r in rows:
        print(
            f"{r['mode']:<10} {r['hr5']:>8.4f} {r['hr10']:>8.4f}"
            f" {r['ndcg5']:>8.4f} {r['ndcg10']:>8.4f} {r['tau']:>8.4f}"
        )
    return 0


def cmd_invariance(run: RunConfig) -> int:
    params, queries = _load_scoring_inputs(run)
    report = permutation_harness(
        params,
        queries,
        InvarianceMode.parse(str(run.values["eval.mode"])),
        P=int(run.values["eval.permutations"]),
        k=int(run.values["eval.k"]),
        seed=run.seed,
    )
    report.write_csv(
        os.path.join(run.out, "robustness_summary.csv"),
        os.path.join(run.out, "robustness_per_query.csv"),
    )
    run.write_resolved()
    agg = report.aggregate
    print(
        f"mode={report.mode.value} P={report.n_permutations} queries={len(report.per_query)}: "
        f"tau={agg['tau']:.4f} rho={agg['rho']:.4f} top{report.k}={agg['topk']:.4f} "
        f"max_score_spread={agg['max_score_spread']:.3g}"
    )
    return 0


def cmd_exposure(run: RunConfig) -> int:
    params, queries = _load_scoring_inputs(run)
    table = exposure_report(
        params,
        queries,
        InvarianceMode.parse(str(run.values["eval.mode"])),
        k=int(run.values["eval.k"]),
        P=int(run.values["eval.permutations"]),
        seed=run.seed,
    )
    table.write_csv(os.path.join(run.out, "exposure.csv"))
    run.write_resolved()
    exp = table.exposure
    print(
        f"slots={table.K} trials={table.trials} top-{table.k} exposure: "
        f"mean={table.slot_mean:.6f} min={exp.min():.4f} max={exp.max():.4f}"
    )
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "invariance": cmd_invariance,
    "exposure": cmd_exposure,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = resolve(args, parser)
        os.makedirs(run.out, exist_ok=True)
        return COMMANDS[args.command](run)
    except StableRankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
