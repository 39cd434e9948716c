"""Command-line entry point wiring the lab together.

Subcommands: gen-data | analyze | rank-layers | train | sample | score-eval |
curate-sim | report. Every run writes a provenance manifest beside its
outputs. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric error. All randomness flows from one root seed; --jobs 1 gives a
fully sequential (byte-reproducible) run.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, config_hash
from .curation import ClipFixture, curate_clip
from .errors import ConfigurationError, DataError, NumericsError
from .grounding import AASTable, VARIANTS, grounding_map
from .guidance import GuidanceConfig, sample_with_guidance
from .igeval import (
    InteractionScoreRow,
    ScoreLedger,
    SyntheticOracleJudge,
    finalize,
    score_document,
    score_raw,
    score_spi,
    write_ledgers,
)
from .layer_select import dominant_layers, influential_layers
from .losses import CausalDecoder, LossWeights
from .masks import downsample_to_latent, read_manifest, union_verb, write_manifest
from .model import FixedPixelCoder, ToyDiT, dump_attention
from .pipeline import analyze_clips, default_analysis_steps, prepare_example
from .propagation import propagation_map
from .reporting import (
    heatmap_svg,
    write_rank_plot_csv,
    write_rankings_json,
    write_run_manifest,
)
from .synthetic import make_dataset
from .training import TrainSettings, load_checkpoint, save_checkpoint, train, write_loss_ledger

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _expandvars(obj):
    if isinstance(obj, str):
        return os.path.expandvars(obj)
    if isinstance(obj, list):
        return [_expandvars(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _expandvars(v) for k, v in obj.items()}
    return obj


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        return _expandvars(json.loads(p.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc


def _out_dir(args, cfg: dict, subcommand: str) -> Path:
    root = args.out or cfg.get("out") or os.environ.get("MATRIX_LAB_OUT") or "runs"
    out = Path(root) / subcommand if args.out is None and cfg.get("out") is None else Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config(args, cfg: dict) -> ModelConfig:
    fields = dict(cfg.get("model", {}))
    if args.seed is not None:
        fields["seed"] = args.seed
    return ModelConfig.from_dict(fields)


def _parse_layers(text: str | None) -> tuple[int, ...]:
    if not text:
        return ()
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise ConfigurationError(f"bad layer list {text!r}") from exc


def _load_dataset(data_dir: str) -> tuple[ModelConfig, list]:
    index_path = Path(data_dir) / "index.json"
    if not index_path.exists():
        raise DataError(f"no dataset index at {index_path}")
    index = json.loads(index_path.read_text())
    config = ModelConfig.from_dict(index["model"])
    clips = []
    for entry in index["clips"]:
        manifest = read_manifest(Path(data_dir) / entry["manifest"])
        video = np.load(Path(data_dir) / entry["video"])
        clips.append((manifest, video))
    return config, clips


def _build_model(args, cfg: dict) -> tuple[ToyDiT, CausalDecoder]:
    if getattr(args, "checkpoint", None):
        raw = Path(args.checkpoint).read_bytes()
        header_len = int.from_bytes(raw[8:16], "little")
        header = json.loads(raw[16 : 16 + header_len].decode())
        config = ModelConfig.from_dict(header["config"])
        model = ToyDiT(config)
        decoder = CausalDecoder(config)
        load_checkpoint(args.checkpoint, model, decoder)
        return model, decoder
    config = _model_config(args, cfg)
    return ToyDiT(config), CausalDecoder(config)


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config_file(args.config)
    out = _out_dir(args, cfg, "gen-data")
    config = _model_config(args, cfg)
    seed = args.seed if args.seed is not None else 0
    clips_dir = out / "clips"
    clips_dir.mkdir(exist_ok=True)
    entries = []
    for script, video, manifest in make_dataset(args.n_clips, seed, config):
        manifest_path = clips_dir / f"{script.clip_id}.json"
        write_manifest(manifest, manifest_path)
        video_path = clips_dir / f"{script.clip_id}_video.npy"
        np.save(video_path, video)
        entries.append(
            {
                "id": script.clip_id,
                "manifest": str(manifest_path.relative_to(out)),
                "video": str(video_path.relative_to(out)),
                "label_success": bool(manifest.extras["label_success"]),
                "verb": script.verb,
            }
        )
    index = {"model": config.to_dict(), "seed": seed, "clips": entries}
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    write_run_manifest(out, "gen-data", {"model": config.to_dict(), "n_clips": args.n_clips}, seed)
    print(f"wrote {len(entries)} clips to {out}")
    return 0


def _prepared_examples(model: ToyDiT, clips) -> list:
    coder = FixedPixelCoder(model.config)
    return [prepare_example(m, v, model.config, coder) for m, v in clips]


def cmd_analyze(args) -> int:
    cfg = _load_config_file(args.config)
    out = _out_dir(args, cfg, "analyze")
    data_config, clips = _load_dataset(args.data)
    if getattr(args, "checkpoint", None):
        model, _ = _build_model(args, cfg)
    else:
        model = ToyDiT(data_config)
    examples = _prepared_examples(model, clips)
    layers = list(_parse_layers(args.layers)) or None
    steps = list(_parse_layers(args.steps)) or None
    seed = args.seed if args.seed is not None else 0

    def run_one(indexed):
        i, ex = indexed
        return analyze_clips(model, [ex], layers=layers, steps=steps, noise_seed=seed * 100003 + i)

    table = AASTable()
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_one, enumerate(examples)))
    else:
        results = [run_one(pair) for pair in enumerate(examples)]
    for part in results:  # fixed clip order keeps the CSV byte-stable
        table.rows.extend(part.rows)
    csv_path = out / "aas.csv"
    table.to_csv(csv_path)
    write_run_manifest(out, "analyze", {"model": model.config.to_dict(), "layers": layers,
                                        "steps": steps}, seed)
    print(f"wrote {csv_path} with {len(table.rows)} rows")
    return 0


def cmd_rank_layers(args) -> int:
    cfg = _load_config_file(args.config)
    out = _out_dir(args, cfg, "rank-layers")
    table = AASTable.from_csv(args.aas)
    labels = None
    if args.data:
        index = json.loads((Path(args.data) / "index.json").read_text())
        labels = {e["id"]: bool(e["label_success"]) for e in index["clips"]}
    variants = [args.variant] if args.variant else list(VARIANTS)
    for variant in variants:
        sub = table.filter(variant=variant)
        if not sub.rows:
            continue
        selected, stats = influential_layers(sub, args.top_k, args.select_k)
        dominant = None
        if labels is not None:
            dominant = dominant_layers(sub, labels, layers=selected)
        write_rankings_json(out / f"rankings_{variant}.json", variant, selected, stats, dominant)
        write_rank_plot_csv(out / f"plot_{variant}.csv", stats, dominant)
        print(f"{variant}: influential={selected}"
              + (f" dominant_top={dominant[0].layer}" if dominant else ""))
    write_run_manifest(out, "rank-layers", {"aas": str(args.aas), "variant": args.variant},
                       args.seed if args.seed is not None else 0)
    return 0


def _discover_layers(model: ToyDiT, examples, labels) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Pre-training analysis pass picking the toy model's own dominant layers."""
    table = analyze_clips(model, examples)
    result = {}
    for variant, count in (("noun-v2t", 2), ("noun-v2v", 1)):
        sub = table.filter(variant=variant)
        selected, _ = influential_layers(sub)
        ranked = dominant_layers(sub, labels, layers=selected)
        result[variant] = tuple(s.layer for s in ranked[:count])
    return result["noun-v2t"], result["noun-v2v"]


def cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    out = _out_dir(args, cfg, "train")
    data_config, clips = _load_dataset(args.data)
    model = ToyDiT(data_config)
    decoder = CausalDecoder(data_config)
    examples = _prepared_examples(model, clips)
    seed = args.seed if args.seed is not None else 0

    glayers = _parse_layers(args.grounding_layers)
    players = _parse_layers(args.propagation_layers)
    if not glayers and not players:
        labels = {ex.clip_id: bool(ex.label_success) for ex in examples}
        glayers, players = _discover_layers(model, examples, labels)
        print(f"discovered grounding layers {glayers}, propagation layers {players}")

    train_cfg = dict(cfg.get("train", {}))
    settings = TrainSettings(
        steps=args.steps if args.steps is not None else train_cfg.get("steps", 500),
        lr=args.lr if args.lr is not None else train_cfg.get("lr", 1e-3),
        seed=seed,
        grounding_layers=glayers,
        propagation_layers=players,
        weights=LossWeights(**train_cfg.get("weights", {})),
    )
    result = train(model, decoder, examples, settings)
    ledger_path = write_loss_ledger(result, out / "loss_ledger.csv")
    ckpt_path = save_checkpoint(
        out / "checkpoint.bin", model, decoder,
        extra={"grounding_layers": list(glayers), "propagation_layers": list(players),
               "steps": settings.steps},
    )
    write_run_manifest(out, "train", {"model": data_config.to_dict(),
                                      "settings": {"steps": settings.steps, "lr": settings.lr,
                                                   "grounding_layers": list(glayers),
                                                   "propagation_layers": list(players)}}, seed)
    if result.rows:
        first, last = result.rows[0], result.rows[-1]
        print(f"step {first['step']}: total={first['total']:.4f} -> "
              f"step {last['step']}: total={last['total']:.4f}")
    print(f"wrote {ckpt_path} and {ledger_path}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config_file(args.config)
    out = _out_dir(args, cfg, "sample")
    data_config, clips = _load_dataset(args.data)
    model, _ = _build_model(args, cfg) if args.checkpoint else (ToyDiT(data_config), None)
    coder = FixedPixelCoder(model.config)
    examples = _prepared_examples(model, clips)
    wanted = args.clip_id or examples[0].clip_id
    ex = next((e for e in examples if e.clip_id == wanted), None)
    if ex is None:
        raise DataError(f"clip {wanted!r} not in dataset")
    guidance = GuidanceConfig(
        scale=args.guidance_scale,
        cag_layers=_parse_layers(args.cag_layers),
        cmg_layers=_parse_layers(args.cmg_layers),
        apply_steps=frozenset(_parse_layers(args.guide_steps)) or None,
    )
    seed = args.seed if args.seed is not None else 0
    video, latent, _ = sample_with_guidance(
        model, coder, ex.x0, ex.i0, ex.text_ids, ex.specs, guidance, seed
    )
    np.save(out / "sample_video.npy", video.numpy())
    np.save(out / "sample_latent.npy", latent.numpy())
    write_run_manifest(out, "sample", {"model": model.config.to_dict(),
                                       "clip": wanted,
                                       "guidance": {"scale": guidance.scale,
                                                    "cag": list(guidance.cag_layers),
                                                    "cmg": list(guidance.cmg_layers)}}, seed)
    print(f"wrote sample for clip {wanted} to {out}")
    return 0


def cmd_score_eval(args) -> int:
    cfg = _load_config_file(args.config)
    out = _out_dir(args, cfg, "score-eval")
    ledgers = []
    if args.answers:
        doc = json.loads(Path(args.answers).read_text())
        docs = doc if isinstance(doc, list) else [doc]
        ledgers = [score_document(d) for d in docs]
    elif args.data:
        _, clips = _load_dataset(args.data)
        for manifest, _ in clips:
            judge = SyntheticOracleJudge(manifest)
            sheets = judge.answer_sheets()
            rows = [InteractionScoreRow(*score_raw(s.answers)) for s in sheets]
            spi = score_spi(sheets[0].frames)
            ledgers.append(finalize(ScoreLedger(clip_id=manifest.clip_id,
                                                interactions=rows, spi=spi)))
    else:
        raise ConfigurationError("score-eval needs --answers or --data")
    write_ledgers(ledgers, out / "eval.json", out / "eval.csv")
    write_run_manifest(out, "score-eval", {"answers": args.answers, "data": args.data},
                       args.seed if args.seed is not None else 0)
    mean_if = float(np.mean([l.if_score for l in ledgers]))
    print(f"scored {len(ledgers)} clips, mean IF {mean_if:.4f}")
    return 0


def cmd_curate_sim(args) -> int:
    cfg = _load_config_file(args.config)
    out = _out_dir(args, cfg, "curate-sim")
    fixture = ClipFixture.from_file(args.fixture)
    report = curate_clip(fixture)
    doc = {
        "clip_id": report.clip_id,
        "discarded": report.discarded,
        "dropped_ids": report.dropped_ids,
        "verifier_calls": report.verifier_calls,
        "naive_calls": report.naive_calls,
        "retained_triplets": [
            {"verb": t.verb, "k_sub": t.k_sub, "k_obj": t.k_obj} for t in report.retained_triplets
        ],
    }
    (out / "curation_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    if report.manifest is not None:
        write_manifest(report.manifest, out / "curated_manifest.json")
    write_run_manifest(out, "curate-sim", {"fixture": str(args.fixture)},
                       args.seed if args.seed is not None else 0)
    print(f"curated {report.clip_id}: discarded={report.discarded} "
          f"calls={report.verifier_calls}/{report.naive_calls}")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config_file(args.config)
    out = _out_dir(args, cfg, "report")
    data_config, clips = _load_dataset(args.data)
    if getattr(args, "checkpoint", None):
        model, _ = _build_model(args, cfg)
    else:
        model = ToyDiT(data_config)
    examples = _prepared_examples(model, clips)
    wanted = args.clip_id or examples[0].clip_id
    ex = next((e for e in examples if e.clip_id == wanted), None)
    if ex is None:
        raise DataError(f"clip {wanted!r} not in dataset")
    layers = list(_parse_layers(args.layers)) or list(range(model.config.n_layers))
    step = args.step
    table = analyze_clips(model, [ex], layers=layers, steps=[step])

    # one forward pass for the overlays and attention dumps
    from .model import ConditionChannels, NoiseSchedule

    schedule = NoiseSchedule(model.config)
    gen = torch.Generator().manual_seed(args.seed if args.seed is not None else 0)
    eps = torch.randn(ex.z0.shape, generator=gen, dtype=model.config.torch_dtype)
    z_t = schedule.q_sample(ex.z0, step, eps)
    with torch.no_grad():
        tokens = model.embed(ConditionChannels(z_t=z_t, x0=ex.x0, i0=ex.i0), ex.text_ids)
        _, records = model(tokens, step, capture=layers)
    for record in records:
        dump_attention(record, model.config, out / f"attention_layer{record.layer}")
        for role in ("sub", "obj", "verb"):
            gmap = grounding_map(record, ex.specs[role], model.config)
            heatmap_svg(
                out / f"grounding_l{record.layer}_{role}.svg",
                gmap.values.numpy(), mask=ex.latent_masks[role].m,
                title=f"layer {record.layer} {role} v2t",
            )
            pmap = propagation_map(record, ex.queries[role], model.config)
            heatmap_svg(
                out / f"propagation_l{record.layer}_{role}.svg",
                pmap.values.numpy(), mask=ex.latent_masks[role].m,
                title=f"layer {record.layer} {role} v2v",
            )
    table.to_csv(out / "report_aas.csv")
    write_run_manifest(out, "report", {"clip": wanted, "layers": layers, "step": step},
                       args.seed if args.seed is not None else 0)
    print(f"wrote report for clip {wanted} to {out}")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnalign",
        description="Attention-mask alignment laboratory for a toy video DiT.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None, help="root seed")
        p.add_argument("--jobs", type=int, default=1, help="per-clip parallelism")
        p.add_argument("--out", default=None, help="output directory "
                                                   "(default $MATRIX_LAB_OUT/<subcommand>)")

    p = sub.add_parser("gen-data", help="generate a synthetic clip dataset")
    common(p)
    p.add_argument("--n-clips", type=int, default=16)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("analyze", help="fill an AAS table over a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--layers", default=None, help="comma-separated layer list")
    p.add_argument("--steps", default=None, help="comma-separated timestep list")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rank-layers", help="influential/dominant layer rankings")
    common(p)
    p.add_argument("--aas", required=True, help="AAS CSV from analyze")
    p.add_argument("--data", default=None, help="dataset dir with success labels")
    p.add_argument("--variant", default=None, choices=list(VARIANTS))
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--select-k", type=int, default=10)
    p.set_defaults(func=cmd_rank_layers)

    p = sub.add_parser("train", help="alignment training run")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--grounding-layers", default=None)
    p.add_argument("--propagation-layers", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="guided or plain sampling")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--clip-id", default=None)
    p.add_argument("--guidance-scale", type=float, default=0.0)
    p.add_argument("--cag-layers", default=None)
    p.add_argument("--cmg-layers", default=None)
    p.add_argument("--guide-steps", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("score-eval", help="interaction scoring from answers or oracle")
    common(p)
    p.add_argument("--answers", default=None, help="recorded answer JSON")
    p.add_argument("--data", default=None, help="dataset dir for the oracle judge")
    p.set_defaults(func=cmd_score_eval)

    p = sub.add_parser("curate-sim", help="run the curation simulator on a fixture")
    common(p)
    p.add_argument("--fixture", required=True)
    p.set_defaults(func=cmd_curate_sim)

    p = sub.add_parser("report", help="figures and attention dumps for one clip")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--clip-id", default=None)
    p.add_argument("--layers", default=None)
    p.add_argument("--step", type=int, default=0)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
