"""Command line: pretrain LMs, train, attack, noise, evaluate, ablate.

Usage: advseq <subcommand> --config <file.yaml> [--seed N] [--out DIR]
[--set key.path=value ...]. The YAML config is the single source of truth;
flags override config keys. Every run writes its resolved config and its
artifacts under the output directory. Errors print one machine-parsable
line to stderr and exit with a class-specific code.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as C
from . import data as D
from . import evaluation as E
from . import training as T
from .advgen import AdvConfig
from .bilm import BiLm, BiLmConfig
from .errors import (CheckpointFormatError, ConfigError, ContractError,
                     DataError, SequenceLengthError, ShapeError,
                     VocabularyError)
from .seeding import child_rng
from .transformer import TransformerConfig

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_MISSING_FILE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_DATA = 5
EXIT_CONTRACT = 6

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "advseq-run",
    "task": {
        "toy": {
            "kind": "cipher_swap",
            "vocab_size": 200,
            "corpus_size": 5000,
            "len_range": [4, 10],
            "val_fraction": 0.1,
        },
    },
    "model": {
        "num_layers": 2,
        "model_dim": 64,
        "num_heads": 4,
        "ff_dim": 128,
        "max_len": 64,
        "dropout_rate": 0.1,
        "attn_map_layer": -1,
        "dtype": "float32",
    },
    "adv": {
        "gamma_src": 0.25,
        "gamma_trg": 0.5,
        "n_candidates": 10,
        "lam": 0.5,
    },
    "train": {
        "lr_scale": 1.0,
        "warmup": 400,
        "betas": [0.9, 0.98],
        "eps": 1.0e-9,
        "batch_tokens": 512,
        "max_steps": 200,
        "checkpoint_every": 0,
        "enable_clean": True,
        "enable_robust": True,
        "enable_lm": True,
        "perturb_src": True,
        "perturb_trg": True,
        "lm_x_checkpoint": None,
        "lm_y_checkpoint": None,
    },
    "pretrain_lm": {
        "steps": 200,
        "batch_size": 32,
        "lr_scale": 1.0,
        "warmup": 100,
        "sides": ["x", "y"],
    },
    "noise": {
        "fraction": 0.1,
        "k": 100,
        "pool_size": 10,
        "fractions": [0.0, 0.1, 0.2, 0.3],
        "lm_checkpoint": None,
    },
    "attack": {
        "checkpoint": None,
    },
    "eval": {
        "checkpoint": None,
        "noise_lm_checkpoint": None,
    },
    "ablate": {
        "src_gammas": [],
        "trg_gammas": [],
    },
}


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in out:
            if path == "":
                raise ConfigError(f"unknown config key {here!r}")
            out[key] = copy.deepcopy(val)
        elif isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(out[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"--set expects key.path=value, got {item!r}")
    key, _, raw = item.partition("=")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"--set {key}: unparsable value {raw!r}: {e}") from None
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {key}: {p!r} is not a config section")
        node = nxt
    node[parts[-1]] = value


def load_config(path, overrides=(), seed=None, out=None) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    cfg = _deep_merge(DEFAULT_CONFIG, raw)
    raw_task = raw.get("task") or {}
    if "files" in raw_task and "toy" in raw_task:
        raise ConfigError("task: give either 'toy' or 'files', not both")
    if "files" in raw_task:
        cfg["task"].pop("toy", None)  # defaults must not shadow a file task
    for item in overrides:
        _apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    return cfg


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from None


def build_task(cfg: dict):
    """Returns (train_pairs, val_pairs, src_vocab, trg_vocab)."""
    task = cfg["task"]
    if task.get("toy"):
        t = dict(task["toy"])
        val_fraction = t.pop("val_fraction", 0.1)
        toy = D.make_toy_task(t["kind"], t["vocab_size"], t["corpus_size"],
                              len_range=tuple(t.get("len_range", (4, 10))),
                              seed=cfg["seed"])
        n_val = max(1, int(val_fraction * len(toy.pairs)))
        return (toy.pairs[:-n_val], toy.pairs[-n_val:],
                toy.src_vocab, toy.trg_vocab)
    if task.get("files"):
        f = task["files"]
        for need in ("src", "trg"):
            if need not in f:
                raise ConfigError(f"task.files requires {need!r}")
        if f.get("src_vocab"):
            src_vocab = D.Vocab.load(f["src_vocab"])
        else:
            src_vocab = D.build_vocab(Path(f["src"]).read_text().splitlines(),
                                      min_count=f.get("min_count", 1))
        if f.get("trg_vocab"):
            trg_vocab = D.Vocab.load(f["trg_vocab"])
        else:
            trg_vocab = D.build_vocab(Path(f["trg"]).read_text().splitlines(),
                                      min_count=f.get("min_count", 1))
        pairs = D.load_parallel(f["src"], f["trg"], src_vocab, trg_vocab)
        if f.get("val_src") and f.get("val_trg"):
            val = D.load_parallel(f["val_src"], f["val_trg"],
                                  src_vocab, trg_vocab)
            return pairs, val, src_vocab, trg_vocab
        n_val = max(1, int(f.get("val_fraction", 0.1) * len(pairs)))
        return pairs[:-n_val], pairs[-n_val:], src_vocab, trg_vocab
    raise ConfigError("task requires a 'toy' or 'files' section")


def build_model_config(cfg: dict, src_vocab, trg_vocab) -> TransformerConfig:
    return _build(TransformerConfig,
                  dict(cfg["model"], src_vocab_size=len(src_vocab),
                       trg_vocab_size=len(trg_vocab)), "model")


def build_train_config(cfg: dict) -> T.TrainConfig:
    adv = _build(AdvConfig, dict(cfg["adv"], seed=cfg["seed"]), "adv")
    section = dict(cfg["train"])
    section.pop("lm_x_checkpoint", None)
    section.pop("lm_y_checkpoint", None)
    section["betas"] = tuple(section["betas"])
    return _build(T.TrainConfig, dict(section, adv=adv), "train")


def build_noise_spec(cfg: dict, fraction=None) -> E.NoiseSpec:
    n = cfg["noise"]
    return E.NoiseSpec(
        fraction=n["fraction"] if fraction is None else fraction,
        k=n["k"], pool_size=n["pool_size"], seed=cfg["seed"])


def _prepare_out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    return out


def _write_task_artifacts(out: Path, train_pairs, val_pairs,
                          src_vocab, trg_vocab) -> None:
    src_vocab.save(out / "src_vocab.txt")
    trg_vocab.save(out / "trg_vocab.txt")
    D.write_corpus(out / "train.src", [p.x for p in train_pairs], src_vocab)
    D.write_corpus(out / "train.trg", [p.y for p in train_pairs], trg_vocab)
    D.write_corpus(out / "val.src", [p.x for p in val_pairs], src_vocab)
    D.write_corpus(out / "val.trg", [p.y for p in val_pairs], trg_vocab)


def _lm_config(cfg: dict, vocab_size: int) -> BiLmConfig:
    m = cfg["model"]
    return BiLmConfig(vocab_size=vocab_size, num_layers=m["num_layers"],
                      model_dim=m["model_dim"], num_heads=m["num_heads"],
                      ff_dim=m["ff_dim"], max_len=m["max_len"],
                      dropout_rate=m["dropout_rate"], dtype=m["dtype"])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_pretrain_lm(cfg: dict) -> int:
    out = _prepare_out(cfg)
    train_pairs, val_pairs, src_vocab, trg_vocab = build_task(cfg)
    _write_task_artifacts(out, train_pairs, val_pairs, src_vocab, trg_vocab)
    p = cfg["pretrain_lm"]
    seed = cfg["seed"]
    with open(out / "pretrain_metrics.jsonl", "w", encoding="utf-8") as fh:
        for side in p["sides"]:
            if side not in ("x", "y"):
                raise ConfigError(f"pretrain_lm.sides entries must be x or y, got {side!r}")
            vocab = src_vocab if side == "x" else trg_vocab
            corpus = [pair.x for pair in train_pairs] if side == "x" \
                else [pair.z for pair in train_pairs]
            lm = BiLm(_lm_config(cfg, len(vocab)),
                      seed=2 * seed if side == "x" else 2 * seed + 1)
            losses = lm.pretrain(corpus, p["steps"], seed=seed,
                                 lr_scale=p["lr_scale"], warmup=p["warmup"],
                                 batch_size=p["batch_size"])
            for i, loss in enumerate(losses, 1):
                fh.write(json.dumps({"side": side, "step": i,
                                     "loss": loss}) + "\n")
            path = out / f"lm_{side}.ckpt"
            C.save_bilm(lm, path, {"seed": seed, "steps": p["steps"]})
            final = losses[-1] if losses else float("nan")
            print(f"pretrained lm_{side}: {p['steps']} steps, "
                  f"final loss {final:.4f} -> {path}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    out = _prepare_out(cfg)
    train_pairs, val_pairs, src_vocab, trg_vocab = build_task(cfg)
    _write_task_artifacts(out, train_pairs, val_pairs, src_vocab, trg_vocab)
    mt_cfg = build_model_config(cfg, src_vocab, trg_vocab)
    tc = build_train_config(cfg)
    state = T.TrainState.create(mt_cfg, tc, seed=cfg["seed"])
    if cfg["train"].get("lm_x_checkpoint"):
        C.load_lm_into_state(state, cfg["train"]["lm_x_checkpoint"], "x")
    if cfg["train"].get("lm_y_checkpoint"):
        C.load_lm_into_state(state, cfg["train"]["lm_y_checkpoint"], "y")
    records = T.train(train_pairs, state, tc,
                      metrics_path=out / "metrics.jsonl", checkpoint_dir=out)
    ckpt = out / "final.ckpt"
    C.save_state(state, ckpt)
    score = E._val_bleu(state, val_pairs, trg_vocab)
    total = records[-1]["total"] if records else float("nan")
    print(f"trained {state.step} steps, final loss {total:.4f}, "
          f"val BLEU {score:.2f} -> {ckpt}")
    return EXIT_OK


def _load_state_for(cfg: dict, section: str, flag_value) -> T.TrainState:
    path = flag_value or cfg[section].get("checkpoint")
    if not path:
        raise ConfigError(f"{section} needs a checkpoint "
                          f"(--checkpoint or {section}.checkpoint)")
    return C.load_state(path)


def cmd_attack(cfg: dict, sentence: str, target=None, checkpoint=None) -> int:
    out = _prepare_out(cfg)
    _, _, src_vocab, trg_vocab = build_task(cfg)
    state = _load_state_for(cfg, "attack", checkpoint)
    x = src_vocab.encode(sentence)
    if len(x) == 0:
        raise ContractError("attack sentence is empty")
    if target:
        y = np.concatenate([trg_vocab.encode(target), [D.EOS_ID]])
    else:
        decoded = [i for i in state.mt.greedy_decode(x) if i >= 4]
        y = np.concatenate([decoded, [D.EOS_ID]]).astype(np.int64)
    pair = D.make_pair(x, y)
    adv = _build(AdvConfig, dict(cfg["adv"], seed=cfg["seed"]), "adv")
    x_adv, z_adv, diag = T.adversarial_pair(
        pair, state, adv, child_rng(cfg["seed"], "attack"))
    adv_tokens = " ".join(src_vocab.decode(x_adv))
    report = {
        "source": " ".join(src_vocab.decode(x)),
        "adversarial_source": adv_tokens,
        "source_changed_positions": int(diag["src_changed"]),
        "decoder_input": " ".join(trg_vocab.decode(pair.z)),
        "adversarial_decoder_input": " ".join(trg_vocab.decode(z_adv)),
        "decoder_changed_positions": int(diag["trg_changed"]),
        "target": " ".join(trg_vocab.decode(y[:-1])),
    }
    with open(out / "attack.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(adv_tokens)
    return EXIT_OK


def cmd_noise(cfg: dict, input_file, lm_checkpoint=None) -> int:
    out = _prepare_out(cfg)
    _, _, src_vocab, _ = build_task(cfg)
    lm_path = lm_checkpoint or cfg["noise"].get("lm_checkpoint")
    if lm_path:
        lm = C.load_bilm(lm_path)
    else:
        print("noise: no lm_checkpoint given; scoring with an untrained "
              "language model", file=sys.stderr)
        lm = BiLm(_lm_config(cfg, len(src_vocab)), seed=2 * cfg["seed"])
    spec = build_noise_spec(cfg)
    emb = lm.params["embed"].data
    pools = E.neighbor_pools(emb, spec.pool_size)
    lines = [ln.strip() for ln in
             Path(input_file).read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    if not lines:
        raise DataError(f"{input_file}: no sentences")
    changed = 0
    with open(out / "noised.txt", "w", encoding="utf-8") as fh:
        for i, line in enumerate(lines):
            x = src_vocab.encode(line)
            noisy = E.make_noisy(x, spec, emb, lm,
                                 rng=child_rng(cfg["seed"], "noise", i),
                                 pools=pools)
            changed += int((noisy != x).sum())
            fh.write(" ".join(src_vocab.decode(noisy)) + "\n")
    print(f"noised {len(lines)} sentences (fraction {spec.fraction}, "
          f"{changed} tokens replaced) -> {out / 'noised.txt'}")
    return EXIT_OK


def cmd_eval(cfg: dict, checkpoint=None, hyp=None, ref=None,
             noise_lm=None) -> int:
    out = _prepare_out(cfg)
    if (hyp is None) != (ref is None):
        raise ConfigError("eval needs both --hyp and --ref, or neither")
    if hyp is not None:
        hyps = Path(hyp).read_text(encoding="utf-8").splitlines()
        refs = Path(ref).read_text(encoding="utf-8").splitlines()
        score = E.bleu(hyps, refs)
        print(f"BLEU {score:.2f}")
        return EXIT_OK
    _, val_pairs, src_vocab, trg_vocab = build_task(cfg)
    state = _load_state_for(cfg, "eval", checkpoint)
    lm_path = noise_lm or cfg["eval"].get("noise_lm_checkpoint")
    bilm = C.load_bilm(lm_path) if lm_path else state.bilm_x
    spec = build_noise_spec(cfg)
    fractions = list(cfg["noise"]["fractions"])
    report = E.robustness_curve(state.mt, val_pairs, fractions, spec, bilm,
                                trg_vocab=trg_vocab)
    report.to_csv(out / "robustness.csv")
    for f, b, s in zip(report.fractions, report.bleu_vs_ref, report.stability):
        print(f"fraction {f}: BLEU {b:.2f} stability {s:.2f}")
    clean = report.bleu_vs_ref[fractions.index(0.0)] if 0.0 in fractions \
        else report.bleu_vs_ref[0]
    print(f"BLEU {clean:.2f}")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    out = _prepare_out(cfg)
    train_pairs, val_pairs, src_vocab, trg_vocab = build_task(cfg)
    _write_task_artifacts(out, train_pairs, val_pairs, src_vocab, trg_vocab)
    mt_cfg = build_model_config(cfg, src_vocab, trg_vocab)
    base = build_train_config(cfg)
    results = E.ablation_run(train_pairs, val_pairs, mt_cfg, base,
                             seed=cfg["seed"], trg_vocab=trg_vocab)
    E.write_ablation_csv(results, out / "ablation.csv")
    for row in results:
        print(f"{row['label']}: BLEU {row['bleu']:.2f}")
    src_gammas = list(cfg["ablate"]["src_gammas"])
    trg_gammas = list(cfg["ablate"]["trg_gammas"])
    if src_gammas and trg_gammas:
        grid = E.gamma_grid(train_pairs, val_pairs, mt_cfg, base,
                            src_gammas, trg_gammas, seed=cfg["seed"],
                            trg_vocab=trg_vocab)
        E.write_gamma_csv(src_gammas, trg_gammas, grid, out / "gamma_grid.csv")
        for i, gs in enumerate(src_gammas):
            cells = " ".join(f"{grid[i, j]:.2f}" for j in range(len(trg_gammas)))
            print(f"gamma_src {gs}: {cells}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="advseq",
        description="Adversarial training and evaluation for toy translation models.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                        help="override a config key, e.g. train.max_steps=50")

    common(sub.add_parser("pretrain-lm", help="pretrain the language models"))
    common(sub.add_parser("train", help="train a translation model"))
    atk = sub.add_parser("attack", help="adversarially perturb one sentence")
    common(atk)
    atk.add_argument("--sentence", required=True, help="source sentence")
    atk.add_argument("--target", default=None,
                     help="reference target (default: the model's own decode)")
    atk.add_argument("--checkpoint", default=None)
    nz = sub.add_parser("noise", help="write an embedding-neighbor noised corpus")
    common(nz)
    nz.add_argument("--input", required=True, help="source text file")
    nz.add_argument("--lm", default=None, help="language-model checkpoint")
    ev = sub.add_parser("eval", help="BLEU and robustness curve")
    common(ev)
    ev.add_argument("--checkpoint", default=None)
    ev.add_argument("--hyp", default=None, help="hypothesis file (BLEU-only mode)")
    ev.add_argument("--ref", default=None, help="reference file (BLEU-only mode)")
    ev.add_argument("--noise-lm", default=None,
                    help="language model that generates the noise")
    common(sub.add_parser("ablate", help="loss-switch rows and gamma grid"))
    return p


def _dispatch(args) -> int:
    cfg = load_config(args.config, args.set, seed=args.seed, out=args.out)
    if args.command == "pretrain-lm":
        return cmd_pretrain_lm(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "attack":
        return cmd_attack(cfg, args.sentence, target=args.target,
                          checkpoint=args.checkpoint)
    if args.command == "noise":
        return cmd_noise(cfg, args.input, lm_checkpoint=args.lm)
    if args.command == "eval":
        return cmd_eval(cfg, checkpoint=args.checkpoint, hyp=args.hyp,
                        ref=args.ref, noise_lm=args.noise_lm)
    if args.command == "ablate":
        return cmd_ablate(cfg)
    raise ConfigError(f"unknown command {args.command!r}")


_EXIT_CODES = (
    (FileNotFoundError, EXIT_MISSING_FILE),
    (ConfigError, EXIT_CONFIG),
    (CheckpointFormatError, EXIT_CHECKPOINT),
    (DataError, EXIT_DATA),
    ((ShapeError, ContractError, VocabularyError, SequenceLengthError),
     EXIT_CONTRACT),
)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as e:  # noqa: BLE001 — single-line reporting boundary
        code = EXIT_OTHER
        for kinds, exit_code in _EXIT_CODES:
            if isinstance(e, kinds):
                code = exit_code
                break
        msg = " ".join(str(e).split())
        print(f"advseq: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
