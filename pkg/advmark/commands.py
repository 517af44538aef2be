import argparse
import logging
import os
import sys
from dataclasses import asdict
from typing import List, Optional, TextIO

from advmark.attack import AttackModels, adversarial_watermark_attack
from advmark.codec import (
    bit_accuracy,
    embed,
    evaluate_codec,
    extract,
    predicted_bits,
    random_message,
    train_codec,
)
from advmark.config import CONFIG, Config
from advmark.dataset import generate_toy_dataset, toy_images, write_image_folder
from advmark.embedder import matching_accuracy, pair_similarities, train_embedder
from advmark.errors import CommandSyntaxError
from advmark.experiment import (
    aggregate,
    codec_images,
    experiment_pairs,
    export_diff_images,
    prepare_models,
    read_pairs_jsonl,
    run_attack_experiment,
    training_dataset,
    write_campaign,
    write_reports,
    write_run_json,
)
from advmark.functions import (
    command_syntax,
    load_png,
    parse_bitstring,
    psnr,
    save_png,
    to_bitstring,
    write_json,
)
from advmark.storage import load_codec, load_embedder, save_codec, save_embedder, save_tensor
from advmark.transforms import grid_specs, robustness_sweep, write_robustness_csv

logger = logging.getLogger(__name__)

USAGE = """Usage: advmark [--config <path>] [--seed <n>] [--out <dir>] <command> [<args>]

Commands:
  gen-data         Write the procedural identity dataset as PNG files
  train-codec      Train the watermark encoder/decoder
  train-embedder   Train the face-embedding network
  embed            Watermark one image
  extract          Decode the watermark bits of one image
  eval-robustness  Bit accuracy under crop/resize/brightness/contrast/JPEG
  attack           Attack a single probe/reference pair
  campaign         Attack every evaluation pair over the ε grid
  report           Rebuild the report files from a per-pair log
  help             Show this text
"""


class _ArgumentParser(argparse.ArgumentParser):
    """argparse, raising CommandSyntaxError instead of exiting"""

    def error(self, message: str):
        raise CommandSyntaxError(message)


def global_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="advmark", add_help=False, allow_abbrev=False)
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    return parser


class Command(object):
    def __init__(self, argv: List[str], config: Config = CONFIG, stream: TextIO = None):
        """A command line invocation

        Args:
            argv: Arguments, without the program name
            config: Configuration to resolve; the process-wide one by default
            stream: Where user-facing output goes (stdout by default)
        """
        self.config = config
        self.stream = stream or sys.stdout

        options, rest = global_parser().parse_known_args(argv)
        self.config_path: Optional[str] = options.config
        self.seed: Optional[int] = options.seed
        self.out: Optional[str] = options.out

        self.args = list(rest)
        self.command = self.args.pop(0) if self.args else "help"

    def print(self, text: str):
        self.stream.write(text.rstrip("\n") + "\n")

    def _resolve_config(self):
        """Defaults < config file < command-line flags"""
        if self.config_path:
            self.config.read_config(self.config_path)
        else:
            self.config.load_dict({})
            self.config.setup_logging()
        self.config.apply_overrides(seed=self.seed, output_dir=self.out)

    @property
    def experiment(self):
        return self.config.experiment

    @property
    def out_dir(self) -> str:
        return self.experiment.output_dir

    def _parse(self, *arguments) -> argparse.Namespace:
        parser = _ArgumentParser(
            prog=f"advmark {self.command}", add_help=False, allow_abbrev=False
        )
        for flags, kwargs in arguments:
            parser.add_argument(*flags, **kwargs)
        return parser.parse_args(self.args)

    def _finish(self, artifacts: List[str]) -> int:
        run_path = write_run_json(
            self.out_dir, self.command, self.experiment.echo(), artifacts
        )
        logger.debug("Run manifest written to %s", run_path)
        return 0

    def process(self) -> int:
        """Process the command and return its exit code"""
        if self.command in ["help", "-h", "--help"]:
            return self._help()

        if self.command in ["gen-data", "gen"]:
            handler = self._gen_data
        elif self.command in ["train-codec"]:
            handler = self._train_codec
        elif self.command in ["train-embedder"]:
            handler = self._train_embedder
        elif self.command in ["embed"]:
            handler = self._embed
        elif self.command in ["extract"]:
            handler = self._extract
        elif self.command in ["eval-robustness", "robustness"]:
            handler = self._eval_robustness
        elif self.command in ["attack"]:
            handler = self._attack
        elif self.command in ["campaign"]:
            handler = self._campaign
        elif self.command in ["report"]:
            handler = self._report
        else:
            return self._unknown_command()

        self._resolve_config()
        os.makedirs(self.out_dir, exist_ok=True)
        return handler()

    @command_syntax("[--identities <n>] [--per-identity <k>] [--size <px>]")
    def _gen_data(self) -> int:
        """Write the toy dataset as <out>/dataset/<identity>/<sample>.png"""
        dataset_config = self.experiment.dataset
        args = self._parse(
            (["--identities"], {"type": int, "default": dataset_config.num_identities}),
            (["--per-identity"], {"type": int, "default": dataset_config.per_identity}),
            (["--size"], {"type": int, "default": dataset_config.image_size}),
        )
        dataset = generate_toy_dataset(
            args.identities, args.per_identity, dataset_config.seed, args.size
        )
        path = os.path.join(self.out_dir, "dataset")
        written = write_image_folder(dataset, path)
        self.print(
            f"Wrote {len(written)} images of {dataset.num_identities} identities to {path}"
        )
        return self._finish([path])

    @command_syntax("[--epochs <n>] [--images <n>]")
    def _train_codec(self) -> int:
        codec_config = self.experiment.codec
        args = self._parse(
            (["--epochs"], {"type": int, "default": codec_config.epochs}),
            (["--images"], {"type": int, "default": codec_config.train_images}),
        )
        codec_config.epochs = args.epochs
        codec_config.train_images = args.images

        train, heldout = codec_images(self.experiment)
        codec, _ = train_codec(train, codec_config)
        evaluation = evaluate_codec(codec, heldout, seed=codec_config.seed)

        path = os.path.join(self.out_dir, "codec")
        save_codec(codec, path, config=asdict(codec_config))
        self.print(
            f"Held-out bit accuracy {evaluation.bit_accuracy:.4f}, "
            f"PSNR {evaluation.psnr:.2f} dB over {evaluation.n_images} images"
        )
        self.print(f"Codec checkpoint written to {path}")
        return self._finish([path])

    @command_syntax("[--epochs <n>]")
    def _train_embedder(self) -> int:
        embedder_config = self.experiment.embedder
        args = self._parse((["--epochs"], {"type": int, "default": embedder_config.epochs}))
        embedder_config.epochs = args.epochs

        dataset, pairs = training_dataset(self.experiment)
        embedder, _ = train_embedder(dataset, embedder_config)
        path = os.path.join(self.out_dir, "embedder")
        save_embedder(embedder, path, config=asdict(embedder_config))

        genuine, impostor = pair_similarities(pairs, embedder)
        accuracy = matching_accuracy(pairs, embedder, self.experiment.matcher)
        self.print(
            f"Held-out pairs: genuine similarity {genuine.mean():.3f}, "
            f"impostor {impostor.mean():.3f}, matching accuracy "
            f"{100 * accuracy:.1f}% at τ = {self.experiment.matcher.tau}"
        )
        self.print(f"Embedder checkpoint written to {path}")
        return self._finish([path])

    @command_syntax("--codec <dir> --image <png> [--message <bits>] [--output <png>]")
    def _embed(self) -> int:
        args = self._parse(
            (["--codec"], {"required": True}),
            (["--image"], {"required": True}),
            (["--message"], {"default": None}),
            (["--output"], {"default": None}),
        )
        codec = load_codec(args.codec)
        image = load_png(args.image)
        if args.message is not None:
            message = parse_bitstring(args.message, codec.message_bits)
        else:
            message = random_message(codec.message_bits, self.experiment.seed)

        watermarked = embed(image, message, codec).data
        output = args.output or os.path.join(self.out_dir, "watermarked.png")
        save_png(output, watermarked)
        self.print(f"Message {to_bitstring(message)}")
        self.print(f"PSNR {psnr(image, watermarked):.2f} dB, written to {output}")
        return self._finish([output])

    @command_syntax("--codec <dir> --image <png> [--message <bits>]")
    def _extract(self) -> int:
        args = self._parse(
            (["--codec"], {"required": True}),
            (["--image"], {"required": True}),
            (["--message"], {"default": None}),
        )
        codec = load_codec(args.codec)
        bits = predicted_bits(extract(load_png(args.image), codec))
        self.print(to_bitstring(bits))
        if args.message is not None:
            expected = parse_bitstring(args.message, codec.message_bits)
            self.print(f"Bit accuracy {bit_accuracy(bits, expected):.4f}")
        return self._finish([])

    @command_syntax("--codec <dir> [--images <n>]")
    def _eval_robustness(self) -> int:
        robustness = self.experiment.robustness
        args = self._parse(
            (["--codec"], {"required": True}),
            (["--images"], {"type": int, "default": robustness.num_images}),
        )
        codec = load_codec(args.codec)
        images = toy_images(
            args.images, robustness.seed, self.experiment.codec.image_size, first_sample=4
        )
        cells = robustness_sweep(codec, images, grid_specs(robustness.grid), robustness.seed)
        path = os.path.join(self.out_dir, "robustness.csv")
        write_robustness_csv(path, cells)
        self.print(f"{len(cells)} cells written to {path}")
        return self._finish([path])

    @command_syntax(
        "--codec <dir> --embedder <dir> --probe <png> --reference <png> [--epsilon <ε·255>]"
    )
    def _attack(self) -> int:
        attack_config = self.experiment.attack
        args = self._parse(
            (["--codec"], {"required": True}),
            (["--embedder"], {"required": True}),
            (["--probe"], {"required": True}),
            (["--reference"], {"required": True}),
            (["--epsilon"], {"type": float, "default": attack_config.epsilon * 255.0}),
        )
        if args.epsilon < 0:
            raise CommandSyntaxError("--epsilon must be >= 0")
        models = AttackModels(load_codec(args.codec), load_embedder(args.embedder))
        size = models.embedder.image_size
        probe, reference = load_png(args.probe, size), load_png(args.reference, size)

        result = adversarial_watermark_attack(
            probe,
            reference,
            models.codec,
            models.embedder,
            attack_config.with_epsilon(args.epsilon / 255.0),
            matcher=self.experiment.matcher,
        )
        record_path = os.path.join(self.out_dir, "attack.json")
        write_json(record_path, result.to_record())
        delta_path = os.path.join(self.out_dir, "delta.f8")
        save_tensor(result.delta, delta_path)
        images = export_diff_images(
            (probe, reference), result, models, os.path.join(self.out_dir, "images")
        )

        self.print(
            f"s(pre, clean) {result.s_pre_clean:.4f}, s(pre, adv) {result.s_pre_adv:.4f}, "
            f"s(post, adv) {result.s_post_adv:.4f}"
        )
        self.print(
            f"Match before watermarking: {result.match_pre}, after: {result.match_post}"
        )
        self.print(f"Message {to_bitstring(result.message)}")
        return self._finish([record_path, delta_path] + images)

    @command_syntax(
        "[--codec <dir>] [--embedder <dir>] [--workers <n>] [--pairs <n>] "
        "[--diff-images <n>]"
    )
    def _campaign(self) -> int:
        experiment = self.experiment
        args = self._parse(
            (["--codec"], {"default": None}),
            (["--embedder"], {"default": None}),
            (["--workers"], {"type": int, "default": experiment.workers}),
            (["--pairs"], {"type": int, "default": experiment.num_pairs}),
            (["--diff-images"], {"type": int, "default": 1}),
        )
        if args.workers < 1 or args.pairs < 1 or args.diff_images < 0:
            raise CommandSyntaxError("--workers and --pairs must be >= 1, --diff-images >= 0")
        experiment.workers = args.workers
        experiment.num_pairs = args.pairs

        models = prepare_models(experiment, self.out_dir, args.codec, args.embedder)
        pairs = experiment_pairs(experiment)
        campaign = run_attack_experiment(experiment, models, pairs)
        artifacts = write_campaign(self.out_dir, campaign, experiment.echo())

        # Image dumps for the first pairs at the largest ε
        largest = [r for r in campaign.results if r.epsilon == experiment.epsilon_grid[-1]]
        for result in largest[: args.diff_images]:
            directory = os.path.join(self.out_dir, "images", f"pair{result.pair_index:04d}")
            artifacts.extend(
                export_diff_images(pairs[result.pair_index], result, models, directory)
            )

        for path in ("codec", "embedder"):
            if os.path.isdir(os.path.join(self.out_dir, path)):
                artifacts.append(os.path.join(self.out_dir, path))

        for row in campaign.rows:
            self.print(
                f"ε {row.epsilon * 255:4.1f}/255  without {row.accuracy_without_watermark:5.1f}%  "
                f"with {row.accuracy_with_watermark:5.1f}%  reduction {row.reduction:5.1f}"
            )
        return self._finish(artifacts)

    @command_syntax("--log <pairs.jsonl>")
    def _report(self) -> int:
        args = self._parse((["--log"], {"required": True}))
        records = read_pairs_jsonl(args.log)
        rows = aggregate(records)
        artifacts = write_reports(self.out_dir, rows, records, self.experiment.echo())
        self.print(f"Report for {len(records)} records written to {self.out_dir}")
        return self._finish(artifacts)

    def _help(self) -> int:
        """Show the help text"""
        self.print(USAGE)
        return 0

    def _unknown_command(self) -> int:
        self.print(f"Unknown command '{self.command}'.\n")
        self.print(USAGE)
        return 2
