"""Command-line entry point: ``hat-music {tokenize,train,generate,eval}``.

Settings come from an optional ``key = value`` config file, then from flags
(``--seed``, ``--variant``, ``--out``, ``--input``, ... and ``--set key=value``),
later sources winning. Unknown keys are rejected before any work starts.

Exit codes: 0 success, 2 parse errors, 3 validation errors, 4 runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from . import evaluation, metrics
from .generation import generate
from .model import HAT, HATConfig, Variant
from .score import ScoreError, SongParseError, Track, load_song, save_song
from .tokenizer import (
    EOS,
    MalformedTokensError,
    TokenizeError,
    Vocabulary,
    count_types,
    default_vocabulary,
    detokenize,
    load_tokens,
    save_tokens,
    tokenize,
    Token,
)
from .training import TrainConfig, fit_sequence, load_training_state, make_optimizer, save_training_state, train

log = logging.getLogger("hat_music")

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
WORKERS_ENV = "HAT_WORKERS"
SONG_SUFFIX = ".song"
TOKEN_SUFFIX = ".tok"


class ConfigError(ValueError):
    """A setting is unknown or has an invalid value (validation class)."""


class ConfigParseError(ValueError):
    """The config file itself cannot be parsed."""


class CommandError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- run configuration -------------------------------------------------------

_MODEL_FIELDS = (
    "d_model", "song_layers", "song_heads", "texture_layers", "texture_heads", "form_layers", "form_heads",
    "max_song_len", "max_texture_len", "max_form_len", "dtype",
)
_TRAIN_FIELDS = ("learning_rate", "batch_size", "max_steps", "loss_threshold", "checkpoint_every")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _tracks(text: str):
    if text.strip().lower() in ("", "all"):
        return None
    return tuple(Track[x.strip().upper()] for x in text.split(","))


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
_KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "out": (str, "."),
    "input": (str, None),
    "checkpoint": (str, None),
    "resume": (str, None),
    "variant": (lambda s: Variant.parse(s).value, "full"),
    "num_pieces": (int, 1),
    "prompt": (str, None),
    "max_len": (int, None),
    "reference": (str, None),
    "tokens": (str, None),
    "metrics": (lambda s: tuple(x.strip().lower() for x in s.split(",") if x.strip()), ("ags", "cpi", "cpr")),
    "ngram": (_ints, (2, 3, 4)),
    "lambda": (float, 0.5),
    "tracks": (_tracks, None),
    "bins": (int, 10),
    "strict": (_bool, False),
}
_KEYS.update({f"model.{k}": (str if k == "dtype" else int, None) for k in _MODEL_FIELDS})
_KEYS.update({f"train.{k}": (int if k in ("batch_size", "max_steps", "checkpoint_every") else float, None) for k in _TRAIN_FIELDS})


@dataclass
class RunConfig:
    command: str
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def model_overrides(self) -> dict[str, Any]:
        return {k[6:]: v for k, v in self.values.items() if k.startswith("model.") and v is not None}

    def train_overrides(self) -> dict[str, Any]:
        return {k[6:]: v for k, v in self.values.items() if k.startswith("train.") and v is not None}

    def echo(self) -> dict[str, Any]:
        return {"command": self.command, **{k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigParseError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def build_run_config(command: str, raw: dict[str, str]) -> RunConfig:
    values = {k: default for k, (_, default) in _KEYS.items()}
    for key, text in raw.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _KEYS[key][0](text)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    if not 0.0 <= values["lambda"] <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    if values["num_pieces"] < 0:
        raise ConfigError("num_pieces must be non-negative")
    if values["bins"] < 1:
        raise ConfigError("bins must be positive")
    unknown = set(values["metrics"]) - {"ags", "cpi", "cpvr", "cpr", "next_token"}
    if unknown:
        raise ConfigError(f"unknown metrics: {sorted(unknown)}")
    return RunConfig(command, values)


def _workers() -> int:
    text = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(text)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {text!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive")
    return n


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _input_dir(cfg: RunConfig, key: str = "input") -> Path:
    if not cfg[key]:
        raise ConfigError(f"'{key}' is required for {cfg.command}")
    path = Path(cfg[key])
    if not path.is_dir():
        raise ConfigError(f"{key} directory {path} does not exist")
    return path


def _load_vocab(directory: Path) -> Vocabulary:
    path = directory / "vocab.json"
    return Vocabulary.load(path) if path.exists() else default_vocabulary()


# --- commands ----------------------------------------------------------------


def cmd_tokenize(cfg: RunConfig) -> int:
    src = _input_dir(cfg)
    files = sorted(src.glob(f"*{SONG_SUFFIX}"))
    if not files:
        raise CommandError(f"no {SONG_SUFFIX} files in {src}", EXIT_VALIDATION)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    vocab = default_vocabulary()
    vocab.save(out / "vocab.json")
    totals = dict.fromkeys(count_types([]), 0)
    errors, codes = {}, []
    for path in files:
        try:
            tokens = tokenize(load_song(path), vocab)
        except SongParseError as exc:
            errors[path.name] = str(exc)
            codes.append(EXIT_PARSE)
            continue
        except (ScoreError, TokenizeError) as exc:
            errors[path.name] = str(exc)
            codes.append(EXIT_VALIDATION)
            continue
        save_tokens(tokens, out / (path.stem + TOKEN_SUFFIX), vocab)
        for k, v in count_types(tokens).items():
            totals[k] += v
    for name, msg in errors.items():
        log.error("%s: %s", name, msg)
    _write_json(out / "tokenize.json", {
        "config": cfg.echo(), "vocab_hash": vocab.hash(), "songs": len(files) - len(errors),
        "type_counts": totals, "errors": errors,
    })
    print(f"tokenized {len(files) - len(errors)}/{len(files)} songs; counts {totals}")
    return codes[0] if codes else EXIT_OK


def _read_token_dir(directory: Path, vocab: Vocabulary) -> list[tuple[str, list]]:
    files = sorted(directory.glob(f"*{TOKEN_SUFFIX}"))
    if not files:
        raise CommandError(f"no {TOKEN_SUFFIX} files in {directory}", EXIT_VALIDATION)
    out = []
    for path in files:
        try:
            out.append((path.stem, load_tokens(path, vocab)))
        except MalformedTokensError as exc:
            raise CommandError(f"{path}: {exc}", EXIT_PARSE) from exc
        except ValueError as exc:
            raise CommandError(f"{path}: {exc}", EXIT_VALIDATION) from exc
    return out


def cmd_train(cfg: RunConfig) -> int:
    src = _input_dir(cfg)
    vocab = _load_vocab(src)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["resume"]:
        model, optimizer, tcfg, start, meta = load_training_state(cfg["resume"])
        if meta.get("vocab_hash") not in (None, vocab.hash()):
            raise CommandError("checkpoint vocabulary does not match the token files", EXIT_VALIDATION)
        if tcfg is None:
            raise CommandError("checkpoint has no training state to resume", EXIT_VALIDATION)
        tcfg = dataclasses.replace(tcfg, **cfg.train_overrides())
    else:
        try:
            mcfg = HATConfig(**cfg.model_overrides(), variant=cfg["variant"], seed=cfg["seed"], vocab_sizes=vocab.sizes)
            mcfg = _fit_embed_dims(mcfg)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        model = HAT(mcfg)
        tcfg = TrainConfig(seed=cfg["seed"], **cfg.train_overrides())
        optimizer, start = make_optimizer(model, tcfg), 0
    data = _read_token_dir(src, vocab)
    seqs = [np.asarray(fit_sequence(toks, model.config), dtype=np.int64) for _, toks in data]
    torch.set_num_threads(_workers())
    log_path = out / "loss.csv"
    mode = "a" if cfg["resume"] and log_path.exists() else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss"])
        result = train(
            model, seqs, tcfg, optimizer=optimizer, start_step=start, checkpoint_dir=out,
            on_step=lambda step, loss: writer.writerow([step, f"{loss:.8f}"]),
        )
    extra = {"vocab_hash": vocab.hash(), "vocab": vocab.to_json(), "run": cfg.echo()}
    save_training_state(out / "final.ckpt", model, optimizer, tcfg, result.steps, extra)
    _write_json(out / "train.json", {
        "config": cfg.echo(), "model": model.config.to_dict(), "train": dataclasses.asdict(tcfg),
        "steps": result.steps, "final_loss": result.final_loss, "reached_threshold": result.reached_threshold,
    })
    print(f"trained {result.steps} steps, final loss {result.final_loss:.4f}")
    return EXIT_OK


def _fit_embed_dims(mcfg: HATConfig) -> HATConfig:
    """Scale the default embedding widths when only ``d_model`` was overridden."""
    total = sum(mcfg.embed_dims.values())
    if total == mcfg.d_model:
        return mcfg
    if mcfg.d_model % total:
        raise ConfigError(f"d_model must be a multiple of {total}")
    scale = mcfg.d_model // total
    return dataclasses.replace(mcfg, embed_dims={k: v * scale for k, v in mcfg.embed_dims.items()})


def _load_model(cfg: RunConfig) -> tuple[HAT, Vocabulary]:
    if not cfg["checkpoint"]:
        raise ConfigError(f"'checkpoint' is required for {cfg.command}")
    path = Path(cfg["checkpoint"])
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    model, _, _, _, meta = load_training_state(path, with_optimizer=False)
    vocab = Vocabulary.from_json(meta["vocab"]) if "vocab" in meta else default_vocabulary()
    model.eval()
    return model, vocab


def cmd_generate(cfg: RunConfig) -> int:
    model, vocab = _load_model(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prompt = None
    if cfg["prompt"]:
        try:
            prompt = load_tokens(cfg["prompt"], vocab)
        except MalformedTokensError as exc:
            raise CommandError(str(exc), EXIT_PARSE) from exc
        max_len = cfg["max_len"] or model.config.max_song_len
        if len(prompt) > min(max_len, model.config.max_song_len):
            raise ConfigError(f"prompt of {len(prompt)} tokens exceeds max length {max_len}")
    pieces = []
    for i in range(cfg["num_pieces"]):
        seed = [cfg["seed"], i]
        try:
            res = generate(model, np.random.default_rng(seed), prompt=prompt, max_len=cfg["max_len"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        name = f"piece_{i:03d}"
        save_tokens(res.tokens, out / (name + TOKEN_SUFFIX), vocab)
        info = {"name": name, "seed": seed, "tokens": len(res.tokens), "stop_reason": res.stop_reason,
                "truncated": res.truncated, "repairs": []}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                tokens = res.tokens if not res.truncated else res.tokens + [Token(EOS)]
                song = detokenize(tokens, vocab, title=name, strict=cfg["strict"])
                save_song(song, out / (name + SONG_SUFFIX))
            except (ValueError, ScoreError) as exc:
                info["detokenize_error"] = str(exc)
        info["repairs"] = [str(w.message) for w in caught]
        pieces.append(info)
    _write_json(out / "generate.json", {"config": cfg.echo(), "model": model.config.to_dict(), "pieces": pieces})
    print(f"generated {len(pieces)} pieces")
    return EXIT_OK


def _read_song_dir(directory: Path) -> list[tuple[str, Any]]:
    out = []
    for path in sorted(directory.glob(f"*{SONG_SUFFIX}")):
        try:
            out.append((path.stem, load_song(path)))
        except SongParseError as exc:
            raise CommandError(f"{path}: {exc}", EXIT_PARSE) from exc
        except ScoreError as exc:
            raise CommandError(f"{path}: {exc}", EXIT_VALIDATION) from exc
    return out


def cmd_eval(cfg: RunConfig) -> int:
    wanted = set(cfg["metrics"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report: dict[str, Any] = {"config": cfg.echo()}
    if wanted & {"ags", "cpi", "cpvr", "cpr"}:
        pieces = _read_song_dir(_input_dir(cfg))
        if not pieces:
            raise CommandError(f"no {SONG_SUFFIX} files in {cfg['input']}", EXIT_VALIDATION)
        reference = None
        if wanted & {"cpvr", "cpr"}:
            if not cfg["reference"]:
                raise ConfigError("CPVR/CPR need a reference corpus ('reference')")
            reference = [song.chord_symbols() for _, song in _read_song_dir(_input_dir(cfg, "reference"))]
            if not reference:
                raise ConfigError("reference corpus is empty")
        rows = metrics.score_pieces(pieces, reference, cfg["ngram"], cfg["lambda"], cfg["tracks"])
        ref_hash = metrics.corpus_hash(reference) if reference is not None else ""
        metrics.write_report(out / "metrics.csv", rows, cfg["ngram"], cfg["lambda"], ref_hash)
        report["aggregate"] = metrics.aggregate(rows, cfg["ngram"])
        report["reference_hash"] = ref_hash
        print("aggregate:", json.dumps(report["aggregate"]))
    if "next_token" in wanted or cfg["checkpoint"]:
        model, vocab = _load_model(cfg)
        seqs = [np.asarray(fit_sequence(t, model.config), dtype=np.int64)
                for _, t in _read_token_dir(_input_dir(cfg, "tokens"), vocab)]
        try:
            records = evaluation.next_token_eval(model, seqs, workers=_workers())
        except evaluation.EvalError as exc:
            raise ConfigError(str(exc)) from exc
        summary = evaluation.summarize(records)
        evaluation.write_summary_csv(out / "next_token.csv", summary)
        evaluation.write_trend_csv(out / "mse_trend.csv", evaluation.mse_trend(records, cfg["bins"]))
        report["next_token"] = summary
        print("next-token:", json.dumps(summary))
    _write_json(out / "eval.json", report)
    return EXIT_OK


COMMANDS = {"tokenize": cmd_tokenize, "train": cmd_train, "generate": cmd_generate, "eval": cmd_eval}


# --- argument handling -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hat-music", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=["base", "form", "texture", "full"])
        p.add_argument("--out", help="output directory")
        p.add_argument("--input", help="input directory (songs or token files)")
        p.add_argument("--checkpoint")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "generate":
            p.add_argument("--num-pieces", type=int, dest="num_pieces")
            p.add_argument("--prompt", help="token file to continue")
            p.add_argument("--max-len", type=int, dest="max_len")
        if name == "eval":
            p.add_argument("--reference", help="directory of reference songs for n-gram statistics")
            p.add_argument("--tokens", help="token directory for next-token evaluation")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def collect_settings(args: argparse.Namespace) -> dict[str, str]:
    raw: dict[str, str] = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigParseError(f"cannot read config: {exc}") from exc
        raw.update(parse_config_text(text))
    for key in ("seed", "variant", "out", "input", "checkpoint", "resume", "num_pieces", "prompt", "max_len",
                "reference", "tokens"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = str(value)
    for item in args.set:
        if "=" not in item:
            raise ConfigParseError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_run_config(args.command, collect_settings(args))
        return COMMANDS[args.command](cfg)
    except ConfigParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
