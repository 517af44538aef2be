"""Attack campaigns over an ε grid and the report files built from them"""
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import arrow
import humanize
import numpy as np

from advmark import __version__
from advmark.attack import (
    PAIR_SCHEMA,
    AttackModels,
    AttackResult,
    PairRecord,
    adversarial_watermark_attack,
    face_similarity,
)
from advmark.codec import embed, evaluate_codec, train_codec
from advmark.config import ExperimentConfig
from advmark.dataset import (
    IdentityDataset,
    evaluation_pairs,
    generate_toy_dataset,
    load_image_folder,
    split_folder_dataset,
    toy_images,
)
from advmark.embedder import embed_face, is_match, train_embedder
from advmark.errors import CommandError, DomainError, UntrainedModelError
from advmark.functions import (
    save_png,
    sha256_file,
    write_csv,
    write_json,
    write_markdown,
)
from advmark.storage import load_codec, load_embedder, save_codec, save_embedder

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "advmark.report/1"
SIMILARITY_SCHEMA = "advmark.similarity/1"
RUN_SCHEMA = "advmark.run/1"

REPORT_HEADER = (
    "epsilon",
    "epsilon_255",
    "n_pairs",
    "accuracy_without_watermark",
    "accuracy_with_watermark",
    "reduction",
)
SIMILARITY_HEADER = ("epsilon", "condition", "similarity")

WITH_WATERMARKING = "with_watermarking"
WITHOUT_WATERMARKING = "without_watermarking"

# Face matching accuracy (%) reported for the full-scale system at τ = 0.3
REFERENCE_TABLE = (
    (0.0, 81.8, 73.9, 7.9),
    (0.5, 85.4, 63.5, 21.9),
    (1.0, 88.5, 50.0, 38.5),
    (1.5, 90.9, 35.7, 55.2),
    (2.0, 92.2, 25.0, 67.2),
    (2.5, 94.1, 16.5, 77.6),
    (3.0, 95.7, 8.4, 87.3),
    (3.5, 97.5, 4.5, 93.0),
    (4.0, 98.3, 2.4, 95.9),
)

DIFF_SCALE = 10.0

Pair = Tuple[np.ndarray, np.ndarray]


def format_epsilon(epsilon: float) -> str:
    return repr(float(epsilon))


def format_epsilon_255(epsilon: float) -> str:
    return f"{epsilon * 255.0:.4g}"


@dataclass
class ReportRow(object):
    """Matching accuracy (%) at one perturbation level"""

    epsilon: float
    n_pairs: int
    accuracy_without_watermark: float
    accuracy_with_watermark: float
    accuracy_random_watermark: float = 0.0

    @property
    def reduction(self) -> float:
        return self.accuracy_without_watermark - self.accuracy_with_watermark

    def row(self) -> Tuple[str, ...]:
        return (
            format_epsilon(self.epsilon),
            format_epsilon_255(self.epsilon),
            str(self.n_pairs),
            f"{self.accuracy_without_watermark:.2f}",
            f"{self.accuracy_with_watermark:.2f}",
            f"{self.reduction:.2f}",
        )


@dataclass
class CampaignResult(object):
    rows: List[ReportRow]
    results: List[AttackResult] = field(default_factory=list)

    def records(self) -> List[PairRecord]:
        return [PairRecord.from_result(r) for r in self.results]


def aggregate(records: Iterable[PairRecord]) -> List[ReportRow]:
    """Report rows from per-pair records, recomputing each match decision

    Rows are ordered by ε.
    """
    grouped: Dict[float, List[PairRecord]] = {}
    for record in records:
        grouped.setdefault(record.epsilon, []).append(record)
    if not grouped:
        raise DomainError("No pair records to aggregate")

    rows = []
    for epsilon in sorted(grouped):
        group = grouped[epsilon]
        n = len(group)
        without = sum(is_match(r.s_pre_adv, r.tau) for r in group)
        with_wm = sum(is_match(r.s_post_adv, r.tau) for r in group)
        random_wm = sum(is_match(r.s_post_random, r.tau) for r in group)
        rows.append(
            ReportRow(
                epsilon=epsilon,
                n_pairs=n,
                accuracy_without_watermark=100.0 * without / n,
                accuracy_with_watermark=100.0 * with_wm / n,
                accuracy_random_watermark=100.0 * random_wm / n,
            )
        )
    return rows


def training_dataset(config: ExperimentConfig) -> Tuple[IdentityDataset, List[Pair]]:
    """Embedder training set and the held-out evaluation pairs for `config.dataset`"""
    spec = config.dataset
    if spec.kind == "folder":
        dataset, pairs = split_folder_dataset(load_image_folder(spec.path, spec.image_size))
        return dataset, pairs[: config.num_pairs]

    dataset = generate_toy_dataset(
        spec.num_identities, spec.per_identity, spec.seed, spec.image_size
    )
    pairs = evaluation_pairs(
        min(config.num_pairs, spec.num_identities),
        spec.seed,
        first_sample=spec.per_identity,
        size=spec.image_size,
    )
    return dataset, pairs


def experiment_pairs(config: ExperimentConfig) -> List[Pair]:
    spec = config.dataset
    if spec.kind == "folder":
        return training_dataset(config)[1]
    return evaluation_pairs(
        min(config.num_pairs, spec.num_identities),
        spec.seed,
        first_sample=spec.per_identity,
        size=spec.image_size,
    )


def codec_images(config: ExperimentConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(training, held-out) cover images for the watermark codec"""
    spec = config.codec
    train = toy_images(spec.train_images, spec.seed, spec.image_size)
    heldout = toy_images(spec.heldout_images, spec.seed, spec.image_size, first_sample=2)
    return train, heldout


def prepare_models(
    config: ExperimentConfig,
    out_dir: str,
    codec_path: Optional[str] = None,
    embedder_path: Optional[str] = None,
) -> AttackModels:
    """Load the given checkpoints, training (and saving) whichever is missing"""
    if codec_path:
        codec = load_codec(codec_path)
    else:
        logger.info("No codec checkpoint given, training one")
        train, heldout = codec_images(config)
        codec, _ = train_codec(train, config.codec)
        evaluation = evaluate_codec(codec, heldout, seed=config.codec.seed)
        logger.info(
            "Codec held-out bit accuracy %.4f, PSNR %.2f dB",
            evaluation.bit_accuracy,
            evaluation.psnr,
        )
        save_codec(codec, os.path.join(out_dir, "codec"), config=asdict(config.codec))

    if embedder_path:
        embedder = load_embedder(embedder_path)
    else:
        logger.info("No embedder checkpoint given, training one")
        dataset, _ = training_dataset(config)
        embedder, _ = train_embedder(dataset, config.embedder)
        save_embedder(
            embedder, os.path.join(out_dir, "embedder"), config=asdict(config.embedder)
        )

    return AttackModels(codec, embedder)


def run_attack_experiment(
    config: ExperimentConfig,
    models: AttackModels,
    pairs: Optional[Sequence[Pair]] = None,
) -> CampaignResult:
    """Attack every pair at every ε of the grid

    Pairs are attacked on `config.workers` threads; results keep pair order
    and do not depend on the worker count.

    Raises:
        UntrainedModelError: If the codec or the embedder is untrained.
        DomainError: If there are no pairs.
    """
    if not models.codec.trained:
        raise UntrainedModelError("watermark codec")
    if not models.embedder.trained:
        raise UntrainedModelError("face embedder")
    if pairs is None:
        pairs = experiment_pairs(config)
    if not pairs:
        raise DomainError("No probe/reference pairs to attack")

    results: List[AttackResult] = []
    for epsilon in config.epsilon_grid:
        attack_config = config.attack.with_epsilon(epsilon)
        start = time.monotonic()

        def attack_pair(indexed):
            index, (probe, reference) = indexed
            return adversarial_watermark_attack(
                probe,
                reference,
                models.codec,
                models.embedder,
                attack_config,
                matcher=config.matcher,
                pair_index=index,
            )

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as executor:
                batch = list(executor.map(attack_pair, enumerate(pairs)))
        else:
            batch = [attack_pair(indexed) for indexed in enumerate(pairs)]
        results.extend(batch)

        row = aggregate(PairRecord.from_result(r) for r in batch)[0]
        logger.info(
            "ε = %s/255: without %.1f%%, with %.1f%%, reduction %.1f (%d pairs in %s)",
            format_epsilon_255(epsilon),
            row.accuracy_without_watermark,
            row.accuracy_with_watermark,
            row.reduction,
            len(batch),
            humanize.naturaldelta(time.monotonic() - start),
        )

    rows = aggregate(PairRecord.from_result(r) for r in results)
    return CampaignResult(rows=rows, results=results)


# Writers


def write_report_csv(path: str, rows: Sequence[ReportRow]):
    write_csv(path, REPORT_HEADER, (row.row() for row in rows))


def write_pairs_jsonl(path: str, results: Sequence[AttackResult]):
    try:
        with open(path, "w") as f:
            for result in results:
                f.write(json.dumps(result.to_record(), sort_keys=True))
                f.write("\n")
    except OSError as e:
        raise CommandError(f"Unable to write '{path}': {e}")


def read_pairs_jsonl(path: str) -> List[PairRecord]:
    """Parse a per-pair log

    Raises:
        CommandError: If the file cannot be read or holds a malformed record.
    """
    records = []
    try:
        with open(path) as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(PairRecord.from_record(json.loads(line)))
                except (ValueError, KeyError) as e:
                    raise CommandError(f"{path}:{number}: malformed pair record ({e})")
                except DomainError as e:
                    raise CommandError(f"{path}:{number}: {e.msg}")
    except OSError as e:
        raise CommandError(f"Unable to read '{path}': {e}")
    return records


def export_similarity_distributions(records: Sequence[PairRecord], out_path: str):
    """Long-format CSV of per-pair similarities with and without watermarking

    Raises:
        DomainError: If there are no records.
        CommandError: If the file cannot be written.
    """
    if not records:
        raise DomainError("No results to export")
    ordered = sorted(records, key=lambda r: (r.epsilon, r.pair_index))
    rows = []
    for r in ordered:
        rows.append((format_epsilon(r.epsilon), WITH_WATERMARKING, repr(r.s_post_adv)))
        rows.append((format_epsilon(r.epsilon), WITHOUT_WATERMARKING, repr(r.s_pre_adv)))
    write_csv(out_path, SIMILARITY_HEADER, rows)


def report_markdown(
    rows: Sequence[ReportRow], config_echo: Optional[Dict[str, Any]] = None
) -> str:
    """Markdown rendering of the campaign table and the full-scale reference values"""
    lines = ["# Face matching under adversarial watermarking", ""]
    if config_echo:
        attack = config_echo.get("attack", {})
        lines.append(
            f"τ = {config_echo.get('matcher', {}).get('tau')}, "
            f"T = {attack.get('steps')}, K = {attack.get('rounds')}, "
            f"m init = {attack.get('m_init')}, seed = {config_echo.get('seed')}"
        )
        lines.append("")

    header = "| ε (/255) | " + " | ".join(format_epsilon_255(r.epsilon) for r in rows) + " |"
    lines.append(header)
    lines.append("|---" * (len(rows) + 1) + "|")
    lines.append(
        "| W/o watermarking | "
        + " | ".join(f"{r.accuracy_without_watermark:.1f}" for r in rows)
        + " |"
    )
    lines.append(
        "| W/ watermarking | "
        + " | ".join(f"{r.accuracy_with_watermark:.1f}" for r in rows)
        + " |"
    )
    lines.append("| Reduction | " + " | ".join(f"{r.reduction:.1f}" for r in rows) + " |")
    lines.append(
        "| Random-message watermark | "
        + " | ".join(f"{r.accuracy_random_watermark:.1f}" for r in rows)
        + " |"
    )
    lines.append("")
    lines.append(f"Pairs per level: {rows[0].n_pairs}.")
    lines.append("")

    lines.append("## Reference: full-scale system (not expected to match at desk scale)")
    lines.append("")
    lines.append("| ε (/255) | " + " | ".join(f"{e:g}" for e, *_ in REFERENCE_TABLE) + " |")
    lines.append("|---" * (len(REFERENCE_TABLE) + 1) + "|")
    for label, column in (("W/o watermarking", 1), ("W/ watermarking", 2), ("Reduction", 3)):
        values = " | ".join(f"{entry[column]:.1f}" for entry in REFERENCE_TABLE)
        lines.append(f"| {label} | {values} |")
    lines.append("")
    return "\n".join(lines)


def write_campaign(
    out_dir: str, campaign: CampaignResult, config_echo: Optional[Dict[str, Any]] = None
) -> List[str]:
    """Write every campaign file into `out_dir`; returns their paths"""
    os.makedirs(out_dir, exist_ok=True)
    pairs_path = os.path.join(out_dir, "pairs.jsonl")
    write_pairs_jsonl(pairs_path, campaign.results)
    reports = write_reports(out_dir, campaign.rows, campaign.records(), config_echo)
    return [pairs_path] + reports


def write_reports(
    out_dir: str,
    rows: Sequence[ReportRow],
    records: Sequence[PairRecord],
    config_echo: Optional[Dict[str, Any]] = None,
) -> List[str]:
    """Files derived from the per-pair records alone"""
    report_path = os.path.join(out_dir, "report.csv")
    similarity_path = os.path.join(out_dir, "similarities.csv")
    markdown_path = os.path.join(out_dir, "report.md")
    write_report_csv(report_path, rows)
    export_similarity_distributions(records, similarity_path)
    write_markdown(markdown_path, report_markdown(rows, config_echo))
    logger.info("Report written to %s", markdown_path)
    return [
        report_path,
        similarity_path,
        markdown_path,
        os.path.join(out_dir, "report.html"),
    ]


def difference_image(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| scaled ×10, clamped to 1 and inverted (identical pixels are white)"""
    return 1.0 - np.minimum(1.0, DIFF_SCALE * np.abs(a - b))


def delta_image(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """δ mapped to [0, 1] with zero at mid-gray and ±ε at the extremes"""
    if epsilon == 0:
        return np.full_like(delta, 0.5)
    return np.clip(0.5 + delta / (2.0 * epsilon), 0.0, 1.0)


def export_diff_images(
    pair: Pair, result: AttackResult, models: AttackModels, out_dir: str
) -> List[str]:
    """Write the images of one attacked pair plus a similarity sidecar

    Files: reference, probe, watermarked (I_w), diff_watermarked (|I_w − I_p|),
    perturbed (I_p′), delta, adv_watermarked (I_w′) and diff_adv_watermarked
    (|I_w′ − I_p|). ``similarities.json`` maps each probe-side file to its
    similarity with the reference.
    """
    probe, reference = pair
    os.makedirs(out_dir, exist_ok=True)
    codec, embedder = models.codec, models.embedder
    z_r = embed_face(reference, embedder).data

    watermarked = embed(probe, result.message, codec).data
    perturbed = np.clip(probe + result.delta, 0.0, 1.0)
    adv_watermarked = embed(perturbed, result.message, codec).data

    images = {
        "reference.png": reference,
        "probe.png": probe,
        "watermarked.png": watermarked,
        "diff_watermarked.png": difference_image(watermarked, probe),
        "perturbed.png": perturbed,
        "delta.png": delta_image(result.delta, result.epsilon),
        "adv_watermarked.png": adv_watermarked,
        "diff_adv_watermarked.png": difference_image(adv_watermarked, probe),
    }
    written = []
    for name, image in images.items():
        path = os.path.join(out_dir, name)
        save_png(path, image)
        written.append(path)

    sidecar = {
        "probe.png": face_similarity(probe, z_r, embedder),
        "watermarked.png": face_similarity(watermarked, z_r, embedder),
        "perturbed.png": face_similarity(perturbed, z_r, embedder),
        "adv_watermarked.png": face_similarity(adv_watermarked, z_r, embedder),
        "epsilon": result.epsilon,
        "message": result.to_record()["message"],
        "pair_index": result.pair_index,
    }
    sidecar_path = os.path.join(out_dir, "similarities.json")
    write_json(sidecar_path, sidecar)
    written.append(sidecar_path)
    return written


def write_run_json(
    out_dir: str,
    command: str,
    config_echo: Dict[str, Any],
    artifacts: Sequence[str],
) -> str:
    """Write run.json: command, resolved config, timestamp, version and artifact hashes"""
    os.makedirs(out_dir, exist_ok=True)
    hashes = {}
    for path in artifacts:
        if os.path.isfile(path):
            hashes[os.path.relpath(path, out_dir)] = sha256_file(path)
        elif os.path.isdir(path):
            for root, _, files in os.walk(path):
                for name in sorted(files):
                    file_path = os.path.join(root, name)
                    hashes[os.path.relpath(file_path, out_dir)] = sha256_file(file_path)

    run_path = os.path.join(out_dir, "run.json")
    write_json(
        run_path,
        {
            "schema": RUN_SCHEMA,
            "command": command,
            "version": __version__,
            "timestamp": arrow.utcnow().isoformat(),
            "config": config_echo,
            "artifacts": hashes,
            "schemas": {
                "report.csv": REPORT_SCHEMA,
                "similarities.csv": SIMILARITY_SCHEMA,
                "pairs.jsonl": PAIR_SCHEMA,
            },
        },
    )
    return run_path
