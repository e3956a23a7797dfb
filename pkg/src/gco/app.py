"""
gco コマンドラインツール

サブコマンド:
    gen-data        合成ファッションコーパスを生成
    train-codec     学習型オートエンコーダを学習（learned-ae モードのみ）
    train-pose      ステージ1: 衣服に合うポーズ予測器を学習
    train-outpaint  ステージ2: アウトペイント用デノイザーとテキストエンコーダを学習
    sample-pose     衣服画像からポーズマップをサンプル
    sample          ショーケース画像を1枚生成
    eval            評価（対応/非対応ペア、属性スイープ、顔条件、ポーズ適合、アブレーション）
    audit           融合モデルとアダプタ型ベースラインのパラメータ数・速度比較

終了コード: 0 成功 / 1 入力・設定の検証エラー / 2 実行時エラー
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint_io import (load_codec, load_outpaint_checkpoint, load_pose_checkpoint, save_codec,
                            save_outpaint_checkpoint, save_pose_checkpoint)
from .config_manager import ConfigManager, ExperimentConfig
from .errors import AttributeValueError, CheckpointMismatchError, ConfigError, LayoutError, ShapeError
from .evaluation import (ABLATIONS, ablation_table, attribute_sweep, build_request, evaluate,
                         face_conditioning_effect, format_table, full_is_best, held_out_records,
                         train_for_ablation)
from .image_utils import load_png, save_grid, save_png, write_atomic
from .latent_codec import CodecMode, LatentCodec, train_autoencoder
from .metrics_eval import efficiency_audit
from .ms_acm import FACE_RESOLUTION, restore_face, stitch_prompts
from .outpaint_stage import (ADAPTER, FUSED, build_adapter_baseline, build_fused_outpainter,
                             generate_showcase, train_outpainter)
from .pose_stage import pose_fit_report, sample_poses, train_pose_predictor
from .synth_data import RESOLUTION, generate_dataset, load_manifest

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, CheckpointMismatchError, ShapeError, AttributeValueError, LayoutError)
RUN_MANIFEST = "run_manifest.json"


class ArgumentParser(argparse.ArgumentParser):
    """使い方の誤りを終了コード 1 で返す ArgumentParser"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def write_json(path: Path, data: Any) -> Path:
    text = json.dumps(data, indent=4, ensure_ascii=False, sort_keys=True) + "\n"
    return write_atomic(path, text.encode("utf-8"))


def write_run_manifest(out_dir: Path, args: argparse.Namespace, cfg: ExperimentConfig,
                       outputs: Sequence[Path], seeds: Dict[str, int]) -> Path:
    """実効設定・シード・引数を出力の隣に保存する（再実行で同一バイトになるよう時刻は含めない）"""
    return write_json(Path(out_dir) / RUN_MANIFEST, {
        "gco_version": __version__,
        "command": args.command,
        "argv": list(args.argv or []),
        "config": cfg.to_dict(),
        "seeds": seeds,
        "outputs": [str(p) for p in outputs],
    })


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """--config を読み、コマンドラインの上書きを反映して検証する"""
    manager = ConfigManager(args.config)
    seed = getattr(args, "seed", None)
    overrides = {
        "corpus": {"n": getattr(args, "n", None)} if args.command == "gen-data" else {},
        "sampling": {
            "n_steps": getattr(args, "steps", None) if args.command in ("sample", "sample-pose") else None,
            "cfg_scale": getattr(args, "cfg_scale", None),
            "blend": False if getattr(args, "no_blend", False) else None,
            "seed": seed if args.command in ("sample", "sample-pose", "eval") else None,
        },
        "training": {
            "noise_face": getattr(args, "noise_face", None),
            "loss_on_garment": getattr(args, "loss_on_garment", None),
            "seed": seed if args.command.startswith("train") else None,
        },
    }
    if args.command == "gen-data":
        overrides["corpus"]["seed"] = seed
    if args.command == "train-pose":
        overrides["training"]["pose_steps"] = args.steps
    if args.command == "train-outpaint":
        overrides["training"]["outpaint_steps"] = args.steps
        overrides["outpaint_model"] = {"kind": args.kind}
    if args.command == "train-codec":
        overrides["codec"] = {"ae_steps": args.steps}
    return manager.with_overrides(**overrides).validate()


def load_codec_for(cfg: ExperimentConfig) -> LatentCodec:
    if cfg.codec.mode is CodecMode.PATCH_IDENTITY:
        return LatentCodec(cfg.codec)
    codec = load_codec(cfg.paths.codec_checkpoint)
    if codec.config != cfg.codec:
        raise CheckpointMismatchError(
            f"codec checkpoint {cfg.paths.codec_checkpoint} holds {codec.config.to_dict()}, "
            f"config asks for {cfg.codec.to_dict()}")
    return codec


def _records(cfg: ExperimentConfig, data: Optional[Path]):
    path = Path(data) if data else cfg.paths.data_dir
    return load_manifest(path)


def _out(args: argparse.Namespace, default: Path) -> Path:
    return Path(args.out) if args.out else default


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: ExperimentConfig) -> Path:
    out_dir = _out(args, cfg.paths.data_dir)
    manifest = generate_dataset(cfg.corpus.n, cfg.corpus.seed, out_dir, workers=cfg.corpus.workers or None)
    write_run_manifest(out_dir, args, cfg, [manifest], {"corpus": cfg.corpus.seed})
    return manifest


def cmd_train_codec(args, cfg: ExperimentConfig) -> Path:
    if cfg.codec.mode is not CodecMode.LEARNED_AE:
        raise ConfigError("codec.mode", "train-codec needs mode = \"learned-ae\" (patch-identity has no weights)")
    records = _records(cfg, args.data)
    tc = cfg.codec_training
    codec, history = train_autoencoder([torch.from_numpy(r.image) for r in records], cfg.codec, tc.steps,
                                       tc.batch_size, tc.lr, tc.seed, cfg.codec_width, tc.device)
    path = save_codec(codec, _out(args, cfg.paths.codec_checkpoint),
                      {"stage": "codec", "step": tc.steps, "seed": tc.seed, "loss_history": history})
    write_run_manifest(path.parent, args, cfg, [path], {"training": tc.seed})
    return path


def cmd_train_pose(args, cfg: ExperimentConfig) -> Path:
    codec = load_codec_for(cfg)
    ckpt = train_pose_predictor(_records(cfg, args.data), cfg.pose_model, cfg.schedule.build(),
                                cfg.pose_training, codec)
    path = save_pose_checkpoint(ckpt, _out(args, cfg.paths.pose_checkpoint))
    write_run_manifest(path.parent, args, cfg, [path], {"training": cfg.pose_training.seed})
    return path


def cmd_train_outpaint(args, cfg: ExperimentConfig) -> Path:
    codec = load_codec_for(cfg)
    ckpt = train_outpainter(_records(cfg, args.data), cfg.outpaint_model, cfg.schedule.build(),
                            cfg.outpaint_training, codec, cfg.options, cfg.outpaint_kind,
                            cfg.text_encoder, cfg.adapter)
    path = save_outpaint_checkpoint(ckpt, _out(args, cfg.paths.outpaint_checkpoint(cfg.outpaint_kind)))
    write_run_manifest(path.parent, args, cfg, [path], {"training": cfg.outpaint_training.seed})
    return path


def _load_image(path: Optional[str], grayscale: bool = False) -> Optional[np.ndarray]:
    if path is None:
        return None
    try:
        return load_png(path, grayscale)
    except OSError as e:
        raise ConfigError("input", f"cannot read image {path}: {e}") from e


def cmd_sample_pose(args, cfg: ExperimentConfig) -> Path:
    codec = load_codec_for(cfg)
    pose_ckpt = load_pose_checkpoint(args.pose_ckpt or cfg.paths.pose_checkpoint)
    garment = _load_image(args.garment)
    if garment is None:
        garment = held_out_records(args.record + 1, cfg.evaluation.seed)[args.record].garment
    n = args.n or cfg.sampling.n_poses
    poses = sample_poses(pose_ckpt, garment, n, cfg.sampling.seed, cfg.sampling.n_steps,
                         codec, cfg.schedule.build())
    out_dir = _out(args, cfg.paths.output_dir / "poses")
    outputs = [save_png(p.image, out_dir / f"pose_{i:02d}.png") for i, p in enumerate(poses)]
    outputs.append(save_grid([garment] + [p.image for p in poses], out_dir / "poses_grid.png"))
    write_run_manifest(out_dir, args, cfg, outputs, {"sampling": cfg.sampling.seed})
    return out_dir


def cmd_sample(args, cfg: ExperimentConfig) -> Path:
    codec = load_codec_for(cfg)
    sched = cfg.schedule.build()
    ckpt = load_outpaint_checkpoint(args.ckpt or cfg.paths.outpaint_checkpoint(cfg.outpaint_kind))
    pose_ckpt = load_pose_checkpoint(args.pose_ckpt or cfg.paths.pose_checkpoint) if args.predict_pose else None

    record = held_out_records(args.record + 1, cfg.evaluation.seed)[args.record]
    req = build_request(record, cfg.sampling, cfg.sampling.seed, with_pose=not args.predict_pose)
    mask = _load_image(args.mask, grayscale=True)
    garment = _load_image(args.garment)
    if (garment is None) != (mask is None):
        raise ConfigError("input", "--garment and --mask must be given together")
    if garment is not None:
        req.mask = (mask > 0.5).astype(np.float32)
        req.garment = garment * req.mask[None]
        req.pose = None if args.predict_pose else _load_image(args.pose)
        if req.pose is None and pose_ckpt is None:
            raise ConfigError("input", "a custom garment needs --pose <png> or --predict-pose")
        req.face = None
    face = _load_image(args.face)
    if face is not None:
        req.face = face if face.shape[1:] == (FACE_RESOLUTION, FACE_RESOLUTION) else restore_face(face)
    if args.no_face:
        req.face = None
    if args.prompt_coarse is not None or args.prompt_fine is not None:
        coarse = req.prompts.coarse if args.prompt_coarse is None else args.prompt_coarse
        fine = req.prompts.fine if args.prompt_fine is None else args.prompt_fine
        req.prompts = stitch_prompts(coarse, fine)

    image = generate_showcase(req, ckpt, codec, sched, pose_ckpt)
    out = _out(args, cfg.paths.output_dir / f"showcase_seed{cfg.sampling.seed}.png")
    path = save_png(image, out)
    sidecar = write_json(path.with_suffix(".json"), {
        "request": req.to_dict(),
        "checkpoint": {"kind": ckpt.kind, "step": ckpt.metadata.get("step"), "seed": ckpt.metadata.get("seed")},
        "record": None if garment is not None else record.sample_id,
    })
    write_run_manifest(path.parent, args, cfg, [path, sidecar], {"sampling": cfg.sampling.seed})
    return path


def cmd_eval(args, cfg: ExperimentConfig) -> Path:
    codec = load_codec_for(cfg)
    sched = cfg.schedule.build()
    ev = cfg.evaluation
    out_dir = _out(args, cfg.paths.output_dir / "eval")
    n = args.n or ev.n_face_pairs
    records = held_out_records(n, ev.seed)
    report: Dict[str, Any] = {}
    outputs: List[Path] = []

    need_model = not (args.ablate or args.fit) or args.unpaired or args.sweep or args.face_effect
    if need_model:
        ckpt = load_outpaint_checkpoint(args.ckpt or cfg.paths.outpaint_checkpoint(cfg.outpaint_kind))
        grid = out_dir / "paired_grid.png" if args.grid else None
        report["paired"] = evaluate(ckpt, codec, sched, records, cfg.sampling, grid_path=grid).to_dict()
        if args.unpaired:
            grid = out_dir / "unpaired_grid.png" if args.grid else None
            report["unpaired"] = evaluate(ckpt, codec, sched, records, cfg.sampling, unpaired=True,
                                          grid_path=grid).to_dict()
        if args.sweep:
            report["attribute_sweep"] = attribute_sweep(ckpt, codec, sched, cfg.sampling, ev.n_requests,
                                                        ev.seed + 1)
        if args.face_effect:
            report["face_conditioning"] = face_conditioning_effect(ckpt, codec, sched, records,
                                                                   cfg.sampling).to_dict()
    if args.fit:
        pose_ckpt = load_pose_checkpoint(args.pose_ckpt or cfg.paths.pose_checkpoint)
        fit_records = held_out_records(ev.n_fit, ev.seed + 2)
        poses = [sample_poses(pose_ckpt, r.garment, 1, cfg.sampling.seed + i, cfg.sampling.n_steps,
                              codec, sched)[0].image for i, r in enumerate(fit_records)]
        report["pose_fit"] = pose_fit_report(poses, [r.mask for r in fit_records], ev.fit_threshold,
                                             ev.seed).to_dict()
    if args.ablate:
        dataset = _records(cfg, args.data)
        train_fn = train_for_ablation(cfg, dataset, codec, sched)
        rows = ablation_table(args.ablate, train_fn, cfg.options, codec, sched, records, cfg.sampling)
        logger.info("ablation table:\n" + format_table(rows))
        report["ablation"] = {"rows": rows, "full_is_best": full_is_best(rows)}

    path = write_json(out_dir / "eval.json", report)
    outputs.append(path)
    outputs += sorted(out_dir.glob("*_grid.png"))
    write_run_manifest(out_dir, args, cfg, outputs, {"evaluation": ev.seed, "sampling": cfg.sampling.seed})
    return path


def cmd_audit(args, cfg: ExperimentConfig) -> Path:
    seed = cfg.outpaint_training.seed
    fused = (load_outpaint_checkpoint(args.fused) if args.fused
             else build_fused_outpainter(cfg.outpaint_model, seed, cfg.text_encoder))
    adapter = (load_outpaint_checkpoint(args.adapter) if args.adapter
               else build_adapter_baseline(cfg.outpaint_model, cfg.adapter, seed, cfg.text_encoder))
    f = cfg.codec.downsample_factor
    report = efficiency_audit(fused, adapter, (RESOLUTION // f, RESOLUTION // f), f,
                              cfg.evaluation.audit_batch, cfg.evaluation.audit_steps)
    out_dir = _out(args, cfg.paths.output_dir / "audit")
    path = write_atomic(out_dir / "audit.json", report.to_json().encode("utf-8"))
    write_run_manifest(out_dir, args, cfg, [path], {"model": seed})
    return path


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-codec": cmd_train_codec,
    "train-pose": cmd_train_pose,
    "train-outpaint": cmd_train_outpaint,
    "sample-pose": cmd_sample_pose,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "audit": cmd_audit,
}


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="gco", description="衣服中心のアウトペイントによるショーケース画像生成")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML 設定ファイル（省略時は既定値）")
    common.add_argument("--seed", type=int, default=None, help="このコマンドで使うシードを上書き")
    common.add_argument("--out", type=Path, default=None, help="出力先（ファイルまたはディレクトリ）")
    common.add_argument("-v", "--verbose", action="store_true", help="DEBUG ログを出す")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("gen-data", parents=[common], help="合成コーパスを生成")
    p.add_argument("--n", type=int, default=None, help="サンプル数")

    for name, help_text in (("train-codec", "学習型オートエンコーダを学習"),
                            ("train-pose", "ポーズ予測器を学習"),
                            ("train-outpaint", "アウトペイントモデルを学習")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--data", type=Path, default=None, help="コーパスのディレクトリか manifest.jsonl")
        p.add_argument("--steps", type=int, default=None, help="学習ステップ数")
        if name == "train-outpaint":
            p.add_argument("--kind", choices=[FUSED, ADAPTER], default=None, help="融合モデルかアダプタ型ベースライン")
            p.add_argument("--noise-face", action=argparse.BooleanOptionalAction, default=None,
                           help="顔列にもノイズを加える")
            p.add_argument("--loss-on-garment", action=argparse.BooleanOptionalAction, default=None,
                           help="衣服領域も損失に含める")

    p = sub.add_parser("sample-pose", parents=[common], help="衣服画像からポーズをサンプル")
    p.add_argument("--garment", default=None, help="衣服 PNG（省略時は評価用サンプル）")
    p.add_argument("--record", type=int, default=0, help="評価用サンプルの番号")
    p.add_argument("--n", type=int, default=None, help="ポーズ数")
    p.add_argument("--steps", type=int, default=None, help="サンプリングのステップ数")
    p.add_argument("--pose-ckpt", type=Path, default=None)

    p = sub.add_parser("sample", parents=[common], help="ショーケース画像を生成")
    p.add_argument("--garment", default=None, help="衣服 PNG（--mask と一緒に）")
    p.add_argument("--mask", default=None, help="衣服マスク PNG")
    p.add_argument("--pose", default=None, help="ポーズマップ PNG")
    p.add_argument("--face", default=None, help="顔画像 PNG")
    p.add_argument("--no-face", action="store_true", help="顔条件なしで生成")
    p.add_argument("--predict-pose", action="store_true", help="ポーズを予測器からサンプル")
    p.add_argument("--record", type=int, default=0, help="入力に使う評価用サンプルの番号")
    p.add_argument("--prompt-coarse", default=None, help="粗いプロンプト（シーン）")
    p.add_argument("--prompt-fine", default=None, help="細かいプロンプト（顔）")
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--no-blend", action="store_true", help="衣服領域の潜在ブレンドを無効化")
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--pose-ckpt", type=Path, default=None)

    p = sub.add_parser("eval", parents=[common], help="評価")
    p.add_argument("--n", type=int, default=None, help="評価サンプル数")
    p.add_argument("--ablate", nargs="+", choices=ABLATIONS, default=None, help="アブレーション")
    p.add_argument("--unpaired", action="store_true", help="非対応ペア（別サンプルの顔）も評価")
    p.add_argument("--sweep", action="store_true", help="顔属性スイープ")
    p.add_argument("--face-effect", action="store_true", help="顔条件の有無の差")
    p.add_argument("--fit", action="store_true", help="ポーズ適合テスト")
    p.add_argument("--grid", action="store_true", help="比較グリッド PNG を保存")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--no-blend", action="store_true")
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--pose-ckpt", type=Path, default=None)

    p = sub.add_parser("audit", parents=[common], help="パラメータ数と速度の比較")
    p.add_argument("--fused", type=Path, default=None, help="融合モデルのチェックポイント（省略時は初期化）")
    p.add_argument("--adapter", type=Path, default=None, help="ベースラインのチェックポイント（省略時は初期化）")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv

    for handler in logging.root.handlers[:]:
        logging.root.removeHandler(handler)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )

    try:
        cfg = load_experiment(args)
        result = COMMANDS[args.command](args, cfg)
    except VALIDATION_ERRORS as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_INVALID
    except KeyboardInterrupt:
        logger.info("中断されました")
        return 130
    except Exception as e:
        logger.exception(f"{args.command} に失敗しました: {e}")
        return EXIT_RUNTIME
    logger.info(f"{args.command}: {result}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
