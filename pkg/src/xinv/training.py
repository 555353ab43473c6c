"""Adversarial training loop (gradient-reversal and alternating strategies),
the baseline mode, and the leave-one-source-out protocol."""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datapipe, evaluation, model, objectives
from .autodiff import Graph, Tensor

log = logging.getLogger("xinv.training")

MODES = ("baseline", "grad_reversal", "alternating")

# sub-seed stream for per-epoch shuffles, disjoint from the model-init streams
_SEED_STREAM = 17


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.3
    mode: str = "grad_reversal"
    d_steps: int = 1
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.003
    momentum: float = 0.9
    seed: int = 0
    held_out: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.d_steps < 1:
            raise ConfigError("d_steps must be >= 1")

    def as_dict(self):
        return dataclasses.asdict(self)


def epoch_rng(seed, epoch):
    return np.random.default_rng([int(seed), _SEED_STREAM, int(epoch)])


def lambda_schedule(lam, epoch, total_epochs):
    """Warm-up schedule for the reversal strength: zero for the first quarter
    of training, then 2/(1+exp(-10p)) - 1 over the remaining progress p.

    The hold-out phase matters: the discriminator only starts learning once
    the task loss settles, and if the reversal bites before the discriminator
    is accurate the extractor simply outruns it (hiding source information
    from an untrained adversary) instead of removing the information. The
    later sigmoid ramp avoids the feature blow-up/collapse regimes that full
    strength from step one produces."""
    total = max(total_epochs, 1)
    warmup = total // 4
    if epoch < warmup:
        return 0.0
    p = (epoch + 1 - warmup) / max(total - warmup, 1)
    return lam * (2.0 / (1.0 + np.exp(-10.0 * p)) - 1.0)


def _epoch_record(epoch, loss_p, loss_s, disc_acc, train_acc):
    return {
        "epoch": epoch,
        "L_p": loss_p,
        "L_s": loss_s,
        "disc_acc": disc_acc,
        "train_acc": train_acc,
    }


def _zero_all(params):
    for t in params.named().values():
        t.zero_grad()


def grad_reversal_step(params, opts, xb, yb, ysb, lam):
    """Single-pass update: one backward through the reversal layer, then a
    joint step over all three components.  Returns (L_p, L_s, s_hat, p)."""
    with Graph() as g:
        f = model.extract(params, xb)
        p = model.classify(params, f)
        loss_p = objectives.bce_loss(p, yb)
        s_hat = model.discriminate(params, ad.gradient_reversal(f, lam))
        loss_s = objectives.source_ce_loss(s_hat, ysb)
        total = ad.add(loss_p, loss_s)
        ad.backward(g, total)
    for opt in opts.values():
        opt.step()
    _zero_all(params)
    return float(loss_p.data[0]), float(loss_s.data[0]), s_hat.data, p.data


def alternating_step(params, opts, xb, yb, ysb, lam, d_steps, defer_d=False):
    """Two-phase update: d_steps discriminator updates with the extractor
    frozen, then one extractor/classifier update on L_p - lam * L_s with the
    discriminator frozen.

    With defer_d=True the discriminator updates happen after the extractor
    update (the synchronized variant, update-equivalent to one
    gradient-reversal step)."""

    def d_phase():
        for _ in range(d_steps):
            with Graph() as g:
                f = model.extract(params, xb)
                s_hat = model.discriminate(params, f)
                loss_s = objectives.source_ce_loss(s_hat, ysb)
                ad.backward(g, loss_s)
            opts["d"].step()
            _zero_all(params)

    if not defer_d:
        d_phase()
    with Graph() as g:
        f = model.extract(params, xb)
        p = model.classify(params, f)
        loss_p = objectives.bce_loss(p, yb)
        s_hat = model.discriminate(params, f)
        loss_s = objectives.source_ce_loss(s_hat, ysb)
        obj_ec, _ = objectives.minmax_objectives(loss_p, loss_s, lam)
        ad.backward(g, obj_ec)
    opts["e"].step()
    opts["c"].step()
    _zero_all(params)
    if defer_d:
        d_phase()
    return float(loss_p.data[0]), float(loss_s.data[0]), s_hat.data, p.data


def baseline_step(params, opts, xb, yb):
    with Graph() as g:
        f = model.extract(params, xb)
        p = model.classify(params, f)
        loss_p = objectives.bce_loss(p, yb)
        ad.backward(g, loss_p)
    opts["e"].step()
    opts["c"].step()
    _zero_all(params)
    return float(loss_p.data[0]), p.data


def fit_arrays(config, images, labels, source_ids, n_sources=None):
    """Train on in-memory arrays; returns (ModelParams, per-epoch records)."""
    source_ids = np.asarray(source_ids, dtype=np.intp)
    if n_sources is None:
        n_sources = int(source_ids.max()) + 1
    adversarial = config.mode != "baseline"
    if adversarial and n_sources < 2:
        raise ConfigError(f"mode {config.mode!r} needs at least 2 training sources, got {n_sources}")

    params = model.init_params(n_sources=n_sources if adversarial else None, seed=config.seed)
    opts = {
        "e": objectives.SGD(params.extractor, config.lr, config.momentum),
        "c": objectives.SGD(params.classifier, config.lr, config.momentum),
    }
    if adversarial:
        opts["d"] = objectives.SGD(params.discriminator, config.lr, config.momentum)

    records = []
    for epoch in range(config.epochs):
        rng = epoch_rng(config.seed, epoch)
        lam_t = lambda_schedule(config.lam, epoch, config.epochs)
        sum_p = sum_s = 0.0
        n_batches = 0
        disease_hits = disease_total = 0
        disc_hits = disc_total = 0
        for idx in datapipe.balanced_index_batches(source_ids, config.batch_size, rng):
            xb = Tensor(images[idx])
            yb = labels[idx].reshape(-1, 1)
            if config.mode == "baseline":
                lp, p = baseline_step(params, opts, xb, yb)
                ls = None
            else:
                ysb = objectives.one_hot(source_ids[idx], n_sources)
                if config.mode == "grad_reversal":
                    lp, ls, s_hat, p = grad_reversal_step(params, opts, xb, yb, ysb, lam_t)
                else:
                    lp, ls, s_hat, p = alternating_step(
                        params, opts, xb, yb, ysb, lam_t, config.d_steps
                    )
                disc_hits += int((s_hat.argmax(axis=1) == source_ids[idx]).sum())
                disc_total += idx.size
                sum_s += ls
            sum_p += lp
            n_batches += 1
            disease_hits += int(((p.ravel() > 0.5) == (yb.ravel() > 0.5)).sum())
            disease_total += idx.size
        records.append(
            _epoch_record(
                epoch,
                sum_p / n_batches,
                (sum_s / n_batches) if adversarial else None,
                (disc_hits / disc_total) if adversarial else None,
                disease_hits / disease_total,
            )
        )
        log.info("epoch %d: %s", epoch, records[-1])
    return params, records


def train(config, manifest):
    """Train on a manifest's examples; see fit_arrays for the loop itself."""
    images, labels, source_ids = datapipe.load_examples(manifest)
    return fit_arrays(config, images, labels, source_ids, n_sources=manifest.n_sources)


def discriminator_accuracy(params, images, source_ids, batch_size=256):
    """Argmax source accuracy of the discriminator on extracted features."""
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        x = Tensor(images[start : start + batch_size])
        s_hat = model.discriminate(params, model.extract(params, x)).data
        hits += int((s_hat.argmax(axis=1) == source_ids[start : start + batch_size]).sum())
    return hits / images.shape[0]


def write_run_record(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _run_fold(config_dict, data_dir, held_out, modes, out_dir, fold_idx):
    data_dir = Path(data_dir)
    train_man = datapipe.load_manifest(data_dir / "train.csv").filter(lambda s: s != held_out)
    test_man = datapipe.load_manifest(data_dir / "test.csv")
    train_sources = set(train_man.sources)
    in_test = test_man.filter(lambda s: s in train_sources)
    out_test = test_man.filter(lambda s: s == held_out)
    rows = []
    for mode in modes:
        config = TrainConfig(**{**config_dict, "mode": mode, "held_out": held_out})
        params, records = train(config, train_man)
        auc_in = evaluation.auc_roc(evaluation.evaluate(params, in_test))
        auc_out = evaluation.auc_roc(evaluation.evaluate(params, out_test))
        if out_dir is not None:
            out_dir = Path(out_dir)
            model.save_checkpoint(out_dir / f"fold{fold_idx}_{mode}.ckpt", params)
            write_run_record(out_dir / f"fold{fold_idx}_{mode}.runrecord.jsonl", records)
        rows.append((held_out, mode, auc_in, auc_out))
    return rows


def run_leave_one_out(config, data_dir, modes=None, out_dir=None, jobs=1):
    """Train/evaluate one fold per held-out source (or just config.held_out).

    Each fold trains every requested mode on the remaining sources and scores
    the unseen in-source test split and the held-out source's test split.
    """
    data_dir = Path(data_dir)
    all_sources = datapipe.load_manifest(data_dir / "train.csv").sources
    test_sources = set(datapipe.load_manifest(data_dir / "test.csv").sources)
    missing = [s for s in all_sources if s not in test_sources]
    if missing:
        raise ConfigError(f"missing test split for sources: {missing}")
    if config.held_out is not None:
        if config.held_out not in all_sources:
            raise ConfigError(f"unknown held-out source {config.held_out!r}")
        folds = [config.held_out]
    else:
        folds = list(all_sources)
    if len(all_sources) < 3:
        raise ConfigError("leave-one-out needs at least 3 sources")
    if modes is None:
        modes = ["baseline"] if config.mode == "baseline" else ["baseline", config.mode]

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    config_dict = config.as_dict()
    args = [
        (config_dict, str(data_dir), held_out, modes, str(out_dir) if out_dir else None, i)
        for i, held_out in enumerate(folds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fold_rows = list(pool.map(_run_fold_star, args))
    else:
        fold_rows = [_run_fold(*a) for a in args]

    report = evaluation.EvalReport()
    for rows in fold_rows:
        for held_out, mode, auc_in, auc_out in rows:
            report.add(held_out, mode, auc_in, auc_out)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "report.json").write_text(report.to_json())
        (out_dir / "report.txt").write_text(report.to_table())
        (out_dir / "config.json").write_text(json.dumps(config.as_dict(), indent=2, sort_keys=True) + "\n")
    return report


def _run_fold_star(args):
    return _run_fold(*args)
