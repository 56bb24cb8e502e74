#!/usr/bin/env python3
"""
VoiceShield Command Line
Single entry point for the pipeline: corpus generation, labelling, feature
dumps, training, streaming inference, evaluation and the loss sweep.

Exit codes: 0 success, 1 unexpected error, 2 invalid configuration,
3 I/O or model file error, 4 data contract violation.
"""

import sys
import logging
import argparse
import traceback
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from artifacts import write_csv
from audio_io import read_wav
from config import LOSS_KINDS, RunConfig
from crn import crn_forward
from dsp import clip_features, write_features_csv
from errors import VoiceShieldError
from evaluation import evaluate_clips, export_trace, resolve_head, write_report
from inference import measure_rtf, run_batch, run_streaming
from labels import make_labels, write_labels_csv
from model_store import load_model, save_model, save_optimizer_state
from synth import iter_examples, read_manifest, unit_impulse_air, write_dataset
from train import clips_from_manifest, split_clips, train_loop

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def load_config(args) -> RunConfig:
    """Config file first, then --set assignments, then dedicated flags."""
    config = RunConfig.from_file(args.config)
    config.apply_overrides(args.set)
    flags = {}
    if args.jobs is not None:
        flags['jobs'] = args.jobs
    for key in ('seed', 'loss_kind', 'max_epochs', 'head', 'eval_reference'):
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = value
    if getattr(args, 'no_postprocess', False):
        flags['postprocess'] = False
    if flags:
        config.update(flags)
    return config


def optimizer_path(model_path: Path) -> Path:
    return model_path.with_name(model_path.name + '.opt')


def _load_split(args, config: RunConfig):
    stft, n_mels, jobs = config.stft_config(), config['n_mels'], config['jobs']
    clips = clips_from_manifest(read_manifest(args.manifest), stft, n_mels, jobs)
    if args.val_manifest:
        return clips, clips_from_manifest(read_manifest(args.val_manifest), stft, n_mels, jobs)
    return split_clips(clips, config['val_fraction'], config['seed'])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, config: RunConfig):
    examples = iter_examples(args.count, config['seed'], config.synth_config(), config['jobs'])
    manifest = write_dataset(examples, args.out)
    print(f"Wrote {len(manifest)} examples to {args.out}")


def cmd_label(args, config: RunConfig):
    speech = read_wav(args.speech)
    noise = read_wav(args.noise)
    air = read_wav(args.air) if args.air else unit_impulse_air()
    track = make_labels(speech, air, noise, config.label_config())
    write_labels_csv(track, args.out)
    print(f"Wrote {track.n_frames} label frames to {args.out}")


def cmd_features(args, config: RunConfig):
    features = clip_features(read_wav(args.wav), config.stft_config(), config['n_mels'])
    write_features_csv(features, args.out)


def cmd_train(args, config: RunConfig):
    out = Path(args.out)
    train_set, val_set = _load_split(args, config)
    log_path = Path(args.log) if args.log else out.with_name(out.name + '.log.csv')
    logger.info(f"Training {config['loss_kind']} on {len(train_set)} clips, validating on {len(val_set)}")

    result = train_loop(config.train_config(), train_set, val_set, eval_config=config.eval_config(),
                        log_path=log_path, jobs=config['jobs'])
    save_model(result.model, out)
    save_optimizer_state(result.optimizer.state.to_tensors(), result.model.n_out, optimizer_path(out))
    print(f"Best validation AUC {result.best_auc:.4f} at epoch {result.best_epoch}; model written to {out}")


def cmd_infer(args, config: RunConfig):
    model = load_model(args.model)
    clip = read_wav(args.wav)
    stft, n_mels, eval_config = config.stft_config(), config['n_mels'], config.eval_config()
    postprocess = config['postprocess']

    def run() -> pd.DataFrame:
        if args.mode == 'batch':
            return run_batch(model, clip, stft, n_mels, eval_config, postprocess)
        return run_streaming(model, clip, stft, n_mels, eval_config, postprocess)

    if args.rtf:
        holder = {}
        report = measure_rtf(lambda: holder.setdefault('df', run()), clip.duration_s)
        df = holder['df']
        print(f"rtf {report.rtf:.4f} ({report.ms_per_audio_s:.1f} ms per second of audio, "
              f"CPU {report.cpu_ms_per_audio_s:.1f} ms)")
    else:
        df = run()
    write_csv(df, args.out)
    logger.info(f"Wrote {len(df)} frames to {args.out}")

    if args.trace:
        vad = df['raw_vad'].to_numpy() if 'vad' in model.heads else None
        vnr = df['raw_vnr'].to_numpy() if 'vnr' in model.heads else None
        export_trace(clip, vad, vnr, args.trace, stft, config['vnr_min_db'], config['vnr_max_db'])


def cmd_eval(args, config: RunConfig):
    model = load_model(args.model)
    head = resolve_head(model, config['head'])
    manifest = read_manifest(args.manifest)
    stft = config.stft_config()
    clips = clips_from_manifest(manifest, stft, config['n_mels'], config['jobs'])
    report = evaluate_clips(model, clips, head, config.eval_config(), config['jobs'])
    write_report(report, args.out)

    for i in range(min(args.traces, len(clips))):
        raw = crn_forward(clips[i].features, model).astype(np.float64)
        vad = raw[:, model.head_index('vad')] if 'vad' in model.heads else None
        vnr = raw[:, model.head_index('vnr')] if 'vnr' in model.heads else None
        export_trace(read_wav(manifest['mix_path'].iloc[i]), vad, vnr, Path(args.out) / f'trace_{i:05d}.csv',
                     stft, config['vnr_min_db'], config['vnr_max_db'])
    print(f"AUC {report.overall_auc:.4f}, EER {report.eer:.4f} on the {report.head} head")


def cmd_sweep(args, config: RunConfig):
    """Train and evaluate every loss kind on one corpus and compare AUC by SNR."""
    out = Path(args.out)
    train_set, val_set = _load_split(args, config)
    eval_config = config.eval_config()
    overall, by_snr = [], []

    for kind in args.losses:
        config.update({'loss_kind': kind})
        logger.info(f"Sweep: training {kind}")
        result = train_loop(config.train_config(), train_set, val_set, eval_config=eval_config,
                            log_path=out / f'train_{kind}.log.csv', jobs=config['jobs'])
        save_model(result.model, out / f'model_{kind}.crnv')
        report = evaluate_clips(result.model, val_set, None, eval_config, config['jobs'])
        overall.append({'loss_kind': kind, 'head': report.head, 'auc': report.overall_auc,
                        'eer': report.eer, 'best_epoch': result.best_epoch})
        rows = report.by_snr.copy()
        rows.insert(0, 'loss_kind', kind)
        rows.insert(1, 'head', report.head)
        by_snr.append(rows)

    write_csv(pd.DataFrame(overall), out / 'sweep_overall.csv')
    write_csv(pd.concat(by_snr, ignore_index=True), out / 'sweep_by_snr.csv')
    print(f"Sweep over {len(args.losses)} losses written to {out}")


def cmd_info(args, config: RunConfig):
    model = load_model(args.model)
    print(f"heads: {','.join(model.heads)}")
    print(f"n_out: {model.n_out}")
    print(f"parameters: {model.parameter_count()}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='voiceshield', description='Noise-robust voice activity detection toolkit')
    parser.add_argument('--config', help='key = value config file')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', help='override a config key')
    parser.add_argument('--jobs', type=int, help='worker threads for data generation and evaluation')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='generate a synthetic labelled corpus')
    p.add_argument('--out', required=True)
    p.add_argument('--count', type=int, required=True)
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('label', help='compute VAD and VNR labels from clean components')
    p.add_argument('--speech', required=True)
    p.add_argument('--noise', required=True)
    p.add_argument('--air', help='impulse response WAV; anechoic when omitted')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_label)

    p = sub.add_parser('features', help='dump log-mel features of a WAV file')
    p.add_argument('--wav', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_features)

    p = sub.add_parser('train', help='train a model')
    p.add_argument('--manifest', required=True)
    p.add_argument('--val-manifest')
    p.add_argument('--out', required=True, help='model file')
    p.add_argument('--log', help='training log CSV (default: <out>.log.csv)')
    p.add_argument('--loss', dest='loss_kind', choices=LOSS_KINDS)
    p.add_argument('--max-epochs', type=int)
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('infer', help='run a model over a WAV file')
    p.add_argument('--model', required=True)
    p.add_argument('--wav', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--mode', choices=('stream', 'batch'), default='stream')
    p.add_argument('--no-postprocess', action='store_true')
    p.add_argument('--rtf', action='store_true', help='report processing time per second of audio')
    p.add_argument('--trace', help='also write a plotting trace CSV')
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser('eval', help='evaluate a model on a manifest')
    p.add_argument('--model', required=True)
    p.add_argument('--manifest', required=True)
    p.add_argument('--out', required=True, help='report directory')
    p.add_argument('--head', choices=('vad', 'vnr'))
    p.add_argument('--reference', dest='eval_reference', choices=('vad', 'vnr'))
    p.add_argument('--no-postprocess', action='store_true')
    p.add_argument('--traces', type=int, default=0, help='export traces for the first N clips')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('sweep', help='train and evaluate each loss kind on one corpus')
    p.add_argument('--manifest', required=True)
    p.add_argument('--val-manifest')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--losses', nargs='+', choices=LOSS_KINDS, default=list(LOSS_KINDS))
    p.add_argument('--max-epochs', type=int)
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser('info', help='describe a model file')
    p.add_argument('--model', required=True)
    p.set_defaults(handler=cmd_info)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)

    try:
        config = load_config(args)
        args.handler(args, config)
        return 0
    except VoiceShieldError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 1
    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}")
        logger.error(traceback.format_exc())
        return 1


if __name__ == '__main__':
    sys.exit(main())
