"""Command-line entry point for the transcription pipeline.

Subcommands cover the whole workflow: synthesize a dataset, train the
language model, train the acoustic model, evaluate, and transcribe.
Every command is reproducible from its persisted config and seed alone.

Exit codes: 0 success, 2 configuration or validation problem, 3 i/o.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from .autodiff import AdamState
from .checkpoint import (
    build_model,
    fresh_model,
    load_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from .config import RunConfig, load_run_config, save_run_config
from .data import (
    bundled_icd_path,
    generate_dataset,
    iter_utterances,
    load_icd_list,
    load_manifest,
    save_manifest,
    split_by_speaker,
)
from .audio import frontend_spectrogram, read_wav
from .errors import ConfigError, ContractError, ParseError, ValidationError
from .fusion import beam_search_decode, greedy_decode, train_with_scheduled_lm_sampling
from .lm import Corpus, load_lm, perplexity, save_lm, train_lm
from .metrics import evaluate_dataset, format_report, wer

log = logging.getLogger("icdscribe")


def _load_config(args):
    config = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
        config.dataset = dataclasses.replace(config.dataset, seed=args.seed)
    return config


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate_data(args):
    config = _load_config(args)
    codes = load_icd_list(args.codes if args.codes else bundled_icd_path())
    manifest = generate_dataset(codes, config.dataset)
    held_out = args.holdout or config.dataset.speakers[-1].speaker_id
    train, test = split_by_speaker(manifest, held_out)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(config, out / "config.json")
    save_manifest(train, out / "train.json")
    save_manifest(test, out / "test.json")
    with open(out / "corpus.txt", "w", encoding="utf-8") as fh:
        for code in codes:
            fh.write(" ".join(code.words) + "\n")

    vocab = manifest.vocabulary
    print(f"codes: {len(codes)}")
    print(f"vocabulary: {len(vocab.content_words)} words")
    print(f"train utterances: {len(train.records)} (speakers {', '.join(train.train_speakers)})")
    print(f"test utterances: {len(test.records)} (speaker {held_out})")
    print(f"wrote config.json, corpus.txt, train.json, test.json to {out}")
    return 0


def cmd_train_lm(args):
    with open(args.corpus, encoding="utf-8") as fh:
        corpus = Corpus.from_lines(fh)
    if not corpus.sentences:
        raise ContractError(f"corpus {args.corpus} contains no sentences")
    lm = train_lm(corpus, max_order=args.order)
    save_lm(lm, args.output)
    print(f"sentences: {len(corpus.sentences)}")
    print(f"vocabulary: {corpus.unique_words} words")
    print(f"training perplexity: {perplexity(lm, corpus.sentences):.4f}")
    print(f"wrote {args.output}")
    return 0


def _greedy_wer(model, lm, utterances, cfg, vocab):
    errors = 0
    words = 0
    for utt in utterances:
        hyp = greedy_decode(model, lm, utt.spectrogram, cfg, vocab)
        breakdown = wer(vocab.decode(utt.target), vocab.decode(hyp.tokens))
        errors += breakdown.errors
        words += breakdown.reference_length
    return errors / max(1, words)


def cmd_train(args):
    lm = load_lm(args.lm)
    manifest = load_manifest(Path(args.data) / "train.json")
    vocab = manifest.vocabulary

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.vocabulary != vocab:
            raise ValidationError("checkpoint vocabulary does not match the training manifest")
        config = ckpt.config
        model = build_model(ckpt)
        optimizer = restore_optimizer(ckpt, model.parameters())
        start_epoch = ckpt.step
    else:
        config = _load_config(args)
        model = fresh_model(config, vocab)
        opt_cfg = config.optimizer
        optimizer = AdamState(
            model.parameters(),
            lr=opt_cfg.lr, beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps,
        )
        start_epoch = 0
    epochs = args.epochs if args.epochs is not None else config.training.epochs
    if start_epoch >= epochs:
        raise ContractError(
            f"checkpoint already covers {start_epoch} epochs; raise --epochs to continue"
        )

    log.info("realizing %d utterances", len(manifest.records))
    utterances = list(iter_utterances(manifest))
    held = int(len(utterances) * config.training.holdout_fraction)
    train_slice = utterances[: len(utterances) - held] if held else utterances
    eval_slice = utterances[len(utterances) - held:] if held else utterances

    cadence = config.training.wer_every
    fusion_cfg = config.fusion
    log_path = Path(args.output).with_suffix(".log.jsonl")
    best = (float("inf"), float("inf"))
    started = time.monotonic()

    with open(log_path, "a" if args.resume else "w", encoding="utf-8") as log_fh:

        def on_epoch(stats):
            nonlocal best
            final = stats.epoch == epochs - 1
            measure = final or (cadence > 0 and (stats.epoch + 1) % cadence == 0)
            holdout_wer = None
            if measure:
                holdout_wer = _greedy_wer(model, lm, eval_slice, fusion_cfg, vocab)
                if (holdout_wer, stats.mean_loss) < best:
                    best = (holdout_wer, stats.mean_loss)
                    save_checkpoint(
                        args.output, model, vocab, config, stats.epoch + 1, optimizer
                    )
            record = {
                "epoch": stats.epoch,
                "loss": stats.mean_loss,
                "lm_sample_p": stats.lm_sample_p,
                "wer": holdout_wer,
            }
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()
            log.info(
                "epoch %d  loss %.4f  sample_p %.3f%s",
                stats.epoch, stats.mean_loss, stats.lm_sample_p,
                "" if holdout_wer is None else f"  wer {holdout_wer:.4f}",
            )

        history = train_with_scheduled_lm_sampling(
            model, lm, vocab, train_slice, fusion_cfg,
            epochs=epochs, optimizer=optimizer, seed=config.seed,
            clip_norm=config.training.clip_norm,
            start_epoch=start_epoch, on_epoch=on_epoch,
        )

    elapsed = time.monotonic() - started
    print(f"trained epochs {start_epoch}..{epochs - 1} in {elapsed:.1f}s")
    print(f"final loss: {history[-1].mean_loss:.4f}")
    print(f"best decode wer: {best[0]:.4f} on {len(eval_slice)} utterances")
    print(f"wrote {args.output} and {log_path}")
    return 0


def cmd_evaluate(args):
    ckpt = load_checkpoint(args.ckpt)
    model = build_model(ckpt)
    lm = load_lm(args.lm)
    manifest = load_manifest(args.manifest)
    if manifest.vocabulary != ckpt.vocabulary:
        raise ValidationError("manifest vocabulary does not match the checkpoint")
    report = evaluate_dataset(
        model, lm, manifest, ckpt.config.fusion, seed=args.seed, resamples=args.resamples
    )
    print(format_report(report))
    if args.output:
        _write_json(args.output, report.to_dict())
        print(f"wrote {args.output}")
    return 0


def _decode_inputs(args, ckpt):
    """Yield (utterance id, spectrogram) pairs for a wav file or a manifest."""
    path = Path(args.input)
    if path.suffix.lower() == ".wav":
        waveform = read_wav(path)
        yield path.stem, frontend_spectrogram(waveform, ckpt.config.dataset.frontend)
        return
    manifest = load_manifest(path)
    if manifest.vocabulary != ckpt.vocabulary:
        raise ValidationError("manifest vocabulary does not match the checkpoint")
    for utt in iter_utterances(manifest):
        yield f"{utt.code}/{utt.speaker_id}/{utt.variation_index}", utt.spectrogram


def cmd_transcribe(args):
    ckpt = load_checkpoint(args.ckpt)
    model = build_model(ckpt)
    cfg = ckpt.config.fusion
    overrides = {}
    if args.lambda_acoustic is not None:
        overrides["lambda_acoustic"] = args.lambda_acoustic
    if args.lambda_lm is not None:
        overrides["lambda_lm"] = args.lambda_lm
    if args.greedy:
        overrides["beam_width"] = 1
    elif args.beam is not None:
        overrides["beam_width"] = args.beam
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    lm = load_lm(args.lm) if args.lm else None
    if cfg.lambda_lm > 0 and lm is None:
        raise ConfigError("--lm is required unless --lambda-lm 0 disables fusion")

    lines = []
    for uid, spec in _decode_inputs(args, ckpt):
        best = beam_search_decode(model, lm, spec, cfg, ckpt.vocabulary)
        text = " ".join(ckpt.vocabulary.decode(best.tokens))
        lines.append(f"{uid}\t{text}\t{best.fused:.6f}")
    output = "\n".join(lines)
    print(output)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(output + "\n")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="icdscribe",
        description="Far-field speech to ICD-10 transcription pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="synthesize manifests for a code list")
    p.add_argument("--config", help="run config JSON; defaults apply when omitted")
    p.add_argument("--codes", help="tab-separated code list; bundled list when omitted")
    p.add_argument("--output", required=True, help="directory for manifests and config")
    p.add_argument("--holdout", help="speaker id for the test split; default last speaker")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train-lm", help="fit the interpolated n-gram model")
    p.add_argument("--corpus", required=True, help="text file, one sentence per line")
    p.add_argument("--order", type=int, default=3, help="largest n-gram length")
    p.add_argument("--output", required=True, help="path for the serialized model")
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("train", help="train the acoustic model")
    p.add_argument("--config", help="run config JSON; ignored with --resume")
    p.add_argument("--data", required=True, help="directory holding train.json")
    p.add_argument("--lm", required=True, help="serialized language model")
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", help="write the full report as JSON")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--resamples", type=int, default=1000)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("transcribe", help="decode a wav file or a whole manifest")
    p.add_argument("input", help="wav file or manifest JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lm", help="required unless --lambda-lm 0")
    p.add_argument("--lambda-acoustic", type=float, dest="lambda_acoustic")
    p.add_argument("--lambda-lm", type=float, dest="lambda_lm")
    p.add_argument("--beam", type=int, help="beam width override")
    p.add_argument("--greedy", action="store_true", help="width-1 decoding")
    p.add_argument("--output", help="also write transcriptions to this file")
    p.set_defaults(func=cmd_transcribe)

    return parser


def main(argv=None):
    level = os.environ.get("ICDSCRIBE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, ContractError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON input ({exc})", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
