"""Staged experiment pipeline: datasets, stages, studies, metrics.

Stages write self-describing artifacts tagged with the canonical config
hash; re-running a completed stage with an unchanged config reuses the
artifact, while a changed config raises unless forced.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts as art
from .config import ExperimentConfig, config_hash
from .connect import (
    ConnectionMatrix,
    build_connection_network,
    build_group_scheme,
    identity_connections,
    learn_group_filters,
    train_connections,
)
from .data_io import (
    LabeledSet,
    load_mnist,
    load_stl10,
    sample_labeled_subset,
)
from .dictlearn import Dictionary, train_conv_kmeans, train_kmeans
from .encoder import LayerDesc, NetworkSpec, encode_images, validate_spec
from .errors import ConfigHashMismatchError, MissingPrerequisiteError
from .mosaic import dump_filter_mosaic
from .netcore import (
    ConvLayer,
    MaxPoolLayer,
    Network,
    ReLULayer,
    TrainConfig,
    evaluate,
    fit_network,
    train_mlp,
    _uniform_init,
)
from .synthetic import motif_pair_set

log = logging.getLogger("convclust")

STAGES = (
    "train-dict",
    "train-connections",
    "learn-group-filters",
    "encode",
    "train-classifier",
    "evaluate",
    "dump-filters",
    "report",
)


@dataclass
class MetricsReport:
    """Line-delimited metric records plus convenience accessors."""

    records: list = field(default_factory=list)

    def add(self, record: str, **fields):
        entry = {"record": record, **fields}
        self.records.append(entry)
        return entry

    def extend(self, other: "MetricsReport"):
        self.records.extend(other.records)

    def write_jsonl(self, path, append: bool = True):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        mode = "a" if append else "w"
        with open(path, mode) as fh:
            for entry in self.records:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def final_error(self):
        for entry in reversed(self.records):
            if entry["record"] == "evaluation" and entry.get("split") == "test":
                return entry["error"]
        return None

    def summary(self) -> str:
        lines = []
        for entry in self.records:
            kind = entry["record"]
            rest = {k: v for k, v in entry.items() if k != "record"}
            if kind == "epoch_loss":
                continue
            lines.append(f"{kind}: " + ", ".join(
                f"{k}={v}" for k, v in sorted(rest.items())
            ))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class DataBundle:
    train: LabeledSet
    test: LabeledSet
    labeled: LabeledSet       # the limited-supervision subset
    unlabeled_images: np.ndarray


def load_dataset(cfg: ExperimentConfig) -> DataBundle:
    ds = cfg.dataset
    if ds.kind == "mnist":
        root = ds.root()
        train = load_mnist(root / "train-images-idx3-ubyte",
                           root / "train-labels-idx1-ubyte")
        test = load_mnist(root / "t10k-images-idx3-ubyte",
                          root / "t10k-labels-idx1-ubyte")
    elif ds.kind == "stl10":
        root = ds.root() / "stl10_binary"
        train = load_stl10(root / "train_X.bin", root / "train_y.bin")
        test = load_stl10(root / "test_X.bin", root / "test_y.bin")
    elif ds.kind == "synthetic-pairs":
        train = motif_pair_set(ds.n_per_class, seed=ds.seed,
                               n_classes=ds.n_classes,
                               image_size=ds.image_size)
        test = motif_pair_set(ds.test_per_class, seed=ds.seed,
                              n_classes=ds.n_classes,
                              image_size=ds.image_size,
                              placement_seed=ds.seed + 90_001)
    else:
        raise ValueError(f"unknown dataset kind {ds.kind!r}")
    if ds.labeled_size is not None and ds.labeled_size < len(train):
        labeled = sample_labeled_subset(train, ds.labeled_size, seed=ds.seed)
    else:
        labeled = train
    unlabeled = train.images
    if cfg.unlabeled_cap and len(unlabeled) > cfg.unlabeled_cap:
        keep = np.random.default_rng(ds.seed).choice(
            len(unlabeled), size=cfg.unlabeled_cap, replace=False
        )
        unlabeled = unlabeled[keep]
    return DataBundle(train=train, test=test, labeled=labeled,
                      unlabeled_images=unlabeled)


# ---------------------------------------------------------------------------
# Artifact bookkeeping


def _paths(cfg: ExperimentConfig) -> dict:
    out = cfg.out_dir()
    return {
        "dict_layer1": out / "dict_layer1.art",
        "whitening_layer1": out / "whitening_layer1.art",
        "dict_branch": out / "dict_branch.art",
        "whitening_branch": out / "whitening_branch.art",
        "connections": out / "connections.art",
        "dict_groups": out / "dict_groups.art",
        "netspec": out / "netspec.art",
        "features_train": out / "features_train.art",
        "features_test": out / "features_test.art",
        "classifier": out / "classifier.art",
        "metrics": out / "metrics.jsonl",
        "report": out / "report.txt",
    }


def _check_cached(path: Path, chash: str, force: bool) -> bool:
    """True when a matching artifact already exists and can be reused."""
    if not path.exists():
        return False
    existing = art.artifact_meta(path).get("config_hash")
    if existing == chash:
        return not force
    if not force:
        raise ConfigHashMismatchError(
            f"{path} was produced by config {existing}, current is {chash}; "
            "pass force to overwrite"
        )
    return False


def _require(path: Path, what: str):
    if not path.exists():
        raise MissingPrerequisiteError(f"{what} missing: {path}")


def _train_block_config(block, seed) -> TrainConfig:
    return TrainConfig(
        lr=block.lr, momentum=block.momentum, epochs=block.epochs,
        batch_size=block.batch_size, dropout=block.dropout, seed=seed,
    )


# ---------------------------------------------------------------------------
# Layer-1 helpers


def _train_dictionary(images, block, c, seed) -> Dictionary:
    trainer = train_conv_kmeans if block.algorithm == "conv-kmeans" else train_kmeans
    return trainer(
        images, k=block.k, c=c, s=block.s, epochs=block.epochs,
        **{("windows_per_epoch" if block.algorithm == "conv-kmeans"
            else "patches_per_epoch"): block.samples_per_epoch},
        seed=seed, zca_eps=block.zca_eps, gcn_eps=block.gcn_eps,
    )


def layer1_descs(cfg: ExperimentConfig, divisor: float) -> list:
    descs = [LayerDesc("conv", {"ref": "dict_layer1",
                                "stride": cfg.layer1.stride,
                                "divisor": divisor})]
    if cfg.layer1.pool:
        descs.append(LayerDesc("maxpool", {"size": cfg.layer1.pool}))
    descs.append(LayerDesc("relu"))
    return descs


def layer1_maps(cfg, images, dictionary, divisor, chunk=256) -> np.ndarray:
    """Frozen first-layer feature maps (N, k, h', w') for connection work."""
    spec = NetworkSpec(layers=[LayerDesc("gcn")] + layer1_descs(cfg, divisor))
    store = {"dict_layer1": dictionary}
    pieces = []
    arr = np.asarray(images, dtype=np.float32)
    from .encoder import apply_layers

    for lo in range(0, len(arr), chunk):
        pieces.append(apply_layers(spec.layers, arr[lo:lo + chunk], store))
    return np.concatenate(pieces, axis=0)


def select_divisor(cfg: ExperimentConfig, data: DataBundle,
                   dictionary: Dictionary, report: MetricsReport) -> float:
    """Cross-validate the dynamic-range divisor on a held-out 20% split."""
    grid = [float(v) for v in cfg.divisor_grid]
    if len(grid) == 1:
        return grid[0]
    labeled = data.labeled
    cap = min(len(labeled), cfg.divisor_cv_cap)
    idx = np.random.default_rng(cfg.seed).permutation(len(labeled))[:cap]
    images, labels = labeled.images[idx], labeled.labels[idx]
    n_val = max(1, int(0.2 * cap))
    best, best_err = grid[0], np.inf
    for divisor in grid:
        feats = layer1_maps(cfg, images, dictionary, divisor,
                            chunk=cfg.encode_chunk)
        flat = feats.reshape(len(feats), -1)
        cfg_small = TrainConfig(
            lr=cfg.classifier.train.lr, momentum=cfg.classifier.train.momentum,
            epochs=min(10, cfg.classifier.train.epochs),
            batch_size=cfg.classifier.train.batch_size,
            dropout=cfg.classifier.train.dropout, seed=cfg.seed,
        )
        model = train_mlp(flat[n_val:], labels[n_val:], cfg_small,
                          hidden=cfg.classifier.hidden,
                          classes=labeled.num_classes)
        err = evaluate(model, flat[:n_val], labels[:n_val])
        report.add("divisor_cv", divisor=divisor, val_error=err)
        if err < best_err:
            best, best_err = divisor, err
    report.add("divisor_selected", divisor=best, val_error=best_err)
    return best


# ---------------------------------------------------------------------------
# Stages


def _stage_train_dict(cfg, paths, chash, report, force):
    if _check_cached(paths["dict_layer1"], chash, force):
        report.add("stage", stage="train-dict", cached=True)
        return
    data = load_dataset(cfg)
    c = data.train.images.shape[1]
    dictionary = _train_dictionary(data.unlabeled_images, cfg.layer1.dict,
                                   c, cfg.seed)
    divisor = select_divisor(cfg, data, dictionary, report)
    dictionary.meta["selected_divisor"] = divisor
    art.save_dictionary(paths["dict_layer1"], dictionary, config_hash=chash)
    if dictionary.whitening is not None:
        art.save_whitening(paths["whitening_layer1"], dictionary.whitening,
                           config_hash=chash)
    if cfg.branch is not None:
        branch_dict = _train_dictionary(data.unlabeled_images,
                                        cfg.branch.dict, c, cfg.seed + 1)
        branch_dict.meta["selected_divisor"] = divisor
        art.save_dictionary(paths["dict_branch"], branch_dict,
                            config_hash=chash)
        if branch_dict.whitening is not None:
            art.save_whitening(paths["whitening_branch"],
                               branch_dict.whitening, config_hash=chash)


def _stage_train_connections(cfg, paths, chash, report, force):
    if cfg.connections is None:
        report.add("stage", stage="train-connections", skipped="no connections block")
        return
    if _check_cached(paths["connections"], chash, force):
        report.add("stage", stage="train-connections", cached=True)
        return
    _require(paths["dict_layer1"], "layer-1 dictionary")
    dictionary = art.load_dictionary(paths["dict_layer1"])
    divisor = dictionary.meta.get("selected_divisor", 1.0)
    data = load_dataset(cfg)
    feats = layer1_maps(cfg, data.labeled.images, dictionary, divisor,
                        chunk=cfg.encode_chunk)
    cn = cfg.connections
    scheme = build_group_scheme(dictionary.k, cn.group_size)
    conn = train_connections(
        feats, data.labeled.labels, scheme, kg=cn.kg, s2=cn.s2,
        cfg=_train_block_config(cn.train, cfg.seed),
        hidden=cn.hidden, pool_size=cn.pool,
        val_fraction=cn.train.val_fraction, patience=cn.train.patience,
    )
    conn.meta["divisor"] = divisor
    for epoch, loss in enumerate(conn.meta.get("loss_history", [])):
        report.add("epoch_loss", stage="train-connections", epoch=epoch,
                   loss=loss)
    art.save_connections(paths["connections"], conn, config_hash=chash)


def _stage_learn_group_filters(cfg, paths, chash, report, force):
    if cfg.layer2 is None or cfg.connections is None:
        report.add("stage", stage="learn-group-filters",
                   skipped="no layer2/connections block")
        return
    if _check_cached(paths["dict_groups"], chash, force):
        report.add("stage", stage="learn-group-filters", cached=True)
        return
    _require(paths["dict_layer1"], "layer-1 dictionary")
    _require(paths["connections"], "connection matrix")
    dictionary = art.load_dictionary(paths["dict_layer1"])
    conn = art.load_connections(paths["connections"])
    divisor = dictionary.meta.get("selected_divisor", 1.0)
    data = load_dataset(cfg)
    feats = layer1_maps(cfg, data.unlabeled_images, dictionary, divisor,
                        chunk=cfg.encode_chunk)
    from .connect import apply_connections

    mixed = apply_connections(conn, feats)
    scheme = build_group_scheme(conn.n_out, cfg.connections.group_size)
    dicts = learn_group_filters(
        mixed, scheme, k_per_group=cfg.layer2.dict.k, s2=cfg.layer2.dict.s,
        epochs=cfg.layer2.dict.epochs,
        samples_per_epoch=cfg.layer2.dict.samples_per_epoch,
        seed=cfg.seed + 2,
        zca_eps=cfg.layer2.dict.zca_eps, gcn_eps=cfg.layer2.dict.gcn_eps,
    )
    art.save_dictionaries(paths["dict_groups"], dicts, config_hash=chash)


def build_encoder_spec(cfg: ExperimentConfig, divisor: float) -> NetworkSpec:
    """The full encoding stack (gcn, then two-layer and one-layer branches)."""
    main_branch = layer1_descs(cfg, divisor)
    if cfg.connections is not None and cfg.layer2 is not None:
        main_branch += [
            LayerDesc("mix", {"ref": "connections"}),
            LayerDesc("groupconv", {"ref": "dict_groups",
                                    "divisor": cfg.group_divisor}),
            LayerDesc("maxpool", {"size": cfg.layer2.pool}),
            LayerDesc("relu"),
            LayerDesc("flatten"),
        ]
    else:
        main_branch += [LayerDesc("flatten")]
    branches = [main_branch]
    if cfg.branch is not None:
        branches.append([
            LayerDesc("conv", {"ref": "dict_branch", "stride": 1,
                               "divisor": divisor}),
            LayerDesc("maxpool", {"size": cfg.branch.pool}),
            LayerDesc("relu"),
            LayerDesc("flatten"),
        ])
    layers = [LayerDesc("gcn")]
    if len(branches) == 1:
        layers += branches[0]
    else:
        layers.append(LayerDesc("concat", {"branches": branches}))
    return NetworkSpec(layers=layers, meta={"divisor": divisor})


def _encoder_store(cfg, paths) -> dict:
    store = {"dict_layer1": art.load_dictionary(paths["dict_layer1"])}
    if cfg.connections is not None and cfg.layer2 is not None:
        _require(paths["connections"], "connection matrix")
        _require(paths["dict_groups"], "group dictionaries")
        store["connections"] = art.load_connections(paths["connections"])
        store["dict_groups"] = art.load_dictionaries(paths["dict_groups"])
    if cfg.branch is not None:
        _require(paths["dict_branch"], "branch dictionary")
        store["dict_branch"] = art.load_dictionary(paths["dict_branch"])
    return store


def _stage_encode(cfg, paths, chash, report, force):
    if _check_cached(paths["features_train"], chash, force):
        report.add("stage", stage="encode", cached=True)
        return
    _require(paths["dict_layer1"], "layer-1 dictionary")
    store = _encoder_store(cfg, paths)
    divisor = store["dict_layer1"].meta.get("selected_divisor", 1.0)
    spec = build_encoder_spec(cfg, divisor)
    data = load_dataset(cfg)
    shape = validate_spec(spec, store, data.train.images.shape[1:])
    report.add("encode_shape", feature_dim=int(np.prod(shape)),
               divisor=divisor)
    feats_train = encode_images(spec, data.labeled.images, store,
                                chunk=cfg.encode_chunk)
    feats_test = encode_images(spec, data.test.images, store,
                               chunk=cfg.encode_chunk)
    art.save_netspec(paths["netspec"], spec, config_hash=chash)
    art.save_features(paths["features_train"], feats_train,
                      labels=data.labeled.labels, config_hash=chash)
    art.save_features(paths["features_test"], feats_test,
                      labels=data.test.labels, config_hash=chash)


def _stage_train_classifier(cfg, paths, chash, report, force):
    if _check_cached(paths["classifier"], chash, force):
        report.add("stage", stage="train-classifier", cached=True)
        return
    _require(paths["features_train"], "encoded training features")
    feats, labels = art.load_features(paths["features_train"])
    labels = labels.astype(np.int64)
    block = cfg.classifier.train
    tc = _train_block_config(block, cfg.seed)
    val = None
    if block.patience is not None and block.val_fraction > 0:
        n_val = max(1, int(len(feats) * block.val_fraction))
        order = np.random.default_rng(cfg.seed).permutation(len(feats))
        val = (feats[order[:n_val]], labels[order[:n_val]])
        feats, labels = feats[order[n_val:]], labels[order[n_val:]]
    model = train_mlp(feats, labels, tc, hidden=cfg.classifier.hidden,
                      val=val, patience=block.patience)
    for epoch, loss in enumerate(model.meta["history"]["loss"]):
        report.add("epoch_loss", stage="train-classifier", epoch=epoch,
                   loss=loss)
    art.save_mlp(paths["classifier"], model, config_hash=chash)


def _stage_evaluate(cfg, paths, chash, report, force):
    _require(paths["classifier"], "trained classifier")
    _require(paths["features_test"], "encoded test features")
    model = art.load_mlp(paths["classifier"])
    feats, labels = art.load_features(paths["features_test"])
    error = evaluate(model, feats, labels.astype(np.int64))
    report.add("evaluation", split="test", error=error,
               accuracy=1.0 - error, n=len(feats))


def _stage_dump_filters(cfg, paths, chash, report, force):
    _require(paths["dict_layer1"], "layer-1 dictionary")
    out = cfg.out_dir()
    dictionary = art.load_dictionary(paths["dict_layer1"])
    ext = "pgm" if dictionary.c == 1 else "ppm"
    mosaic = dump_filter_mosaic(dictionary, out / f"filters_layer1.{ext}")
    report.add("mosaic", path=str(mosaic))
    if cfg.branch is not None and paths["dict_branch"].exists():
        branch = art.load_dictionary(paths["dict_branch"])
        ext = "pgm" if branch.c == 1 else "ppm"
        mosaic = dump_filter_mosaic(branch, out / f"filters_branch.{ext}")
        report.add("mosaic", path=str(mosaic))


def _stage_report(cfg, paths, chash, report, force):
    metrics_path = paths["metrics"]
    entries = []
    if metrics_path.exists():
        with open(metrics_path) as fh:
            entries = [json.loads(line) for line in fh if line.strip()]
    summary = MetricsReport(records=entries + report.records).summary()
    paths["report"].write_text(summary + "\n")
    report.add("report_written", path=str(paths["report"]))


_STAGE_FUNCS = {
    "train-dict": _stage_train_dict,
    "train-connections": _stage_train_connections,
    "learn-group-filters": _stage_learn_group_filters,
    "encode": _stage_encode,
    "train-classifier": _stage_train_classifier,
    "evaluate": _stage_evaluate,
    "dump-filters": _stage_dump_filters,
    "report": _stage_report,
}


def run_stage(cfg: ExperimentConfig, stage: str, force: bool = False) -> MetricsReport:
    """Run one stage (or "all"); returns the metric records it produced."""
    if stage == "all":
        report = MetricsReport()
        for name in STAGES:
            report.extend(run_stage(cfg, name, force=force))
        return report
    if stage not in _STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    paths = _paths(cfg)
    chash = config_hash(cfg)
    report = MetricsReport()
    start = time.perf_counter()
    _STAGE_FUNCS[stage](cfg, paths, chash, report, force)
    wall = time.perf_counter() - start
    report.add("stage", stage=stage, wall_time_s=round(wall, 3),
               config_hash=chash)
    report.write_jsonl(paths["metrics"])
    log.info("stage %s finished in %.2fs", stage, wall)
    return report


# ---------------------------------------------------------------------------
# Studies


def _single_layer_accuracy(cfg, data, k, s, algorithm, seed) -> float:
    block = type(cfg.layer1.dict)(**{**vars(cfg.layer1.dict),
                                     "k": k, "s": s, "algorithm": algorithm})
    c = data.train.images.shape[1]
    dictionary = _train_dictionary(data.unlabeled_images, block, c, seed)
    feats = layer1_maps(cfg, data.labeled.images, dictionary, 1.0,
                        chunk=cfg.encode_chunk)
    test_feats = layer1_maps(cfg, data.test.images, dictionary, 1.0,
                             chunk=cfg.encode_chunk)
    tc = _train_block_config(cfg.classifier.train, seed)
    model = train_mlp(feats.reshape(len(feats), -1), data.labeled.labels, tc,
                      hidden=cfg.classifier.hidden,
                      classes=data.train.num_classes)
    return 1.0 - evaluate(model, test_feats.reshape(len(test_feats), -1),
                          data.test.labels)


def run_single_layer_study(cfg: ExperimentConfig) -> MetricsReport:
    """Sweep filter count (fixed size) and filter size (fixed count) for
    both clustering algorithms; reports mean accuracy over study seeds."""
    report = MetricsReport()
    study = cfg.study
    if study is None or (not study.filter_counts and not study.filter_sizes):
        report.add("study", note="empty sweep")
        return report
    data = load_dataset(cfg)
    for algorithm in ("kmeans", "conv-kmeans"):
        for k in study.filter_counts:
            accs = [
                _single_layer_accuracy(cfg, data, k, study.fixed_size,
                                       algorithm, seed)
                for seed in study.seeds
            ]
            report.add("sweep_point", axis="filter_count", algorithm=algorithm,
                       k=int(k), s=int(study.fixed_size),
                       accuracy=float(np.mean(accs)),
                       accuracies=[float(a) for a in accs])
        for s in study.filter_sizes:
            accs = [
                _single_layer_accuracy(cfg, data, study.fixed_count, s,
                                       algorithm, seed)
                for seed in study.seeds
            ]
            report.add("sweep_point", axis="filter_size", algorithm=algorithm,
                       k=int(study.fixed_count), s=int(s),
                       accuracy=float(np.mean(accs)),
                       accuracies=[float(a) for a in accs])
    report.write_jsonl(_paths(cfg)["metrics"])
    return report


# ---------------------------------------------------------------------------
# Layer-combination grid (two-layer networks)


def _grid_layer2_unsup_accuracy(cfg, data, feats_train, feats_test, conn,
                                seed) -> float:
    """Unsupervised second layer: group conv k-means on mixed maps."""
    from .connect import apply_connections
    from .netcore import group_conv, maxpool, relu

    mixed_train = apply_connections(conn, feats_train)
    mixed_test = apply_connections(conn, feats_test)
    scheme = build_group_scheme(conn.n_out, cfg.connections.group_size)
    dicts = learn_group_filters(
        mixed_train, scheme, k_per_group=cfg.layer2.dict.k,
        s2=cfg.layer2.dict.s, epochs=cfg.layer2.dict.epochs,
        samples_per_epoch=cfg.layer2.dict.samples_per_epoch, seed=seed + 7,
    )
    filters = np.stack([d.filters for d in dicts])

    def encode(maps):
        out = group_conv(maps, scheme, filters)
        out = maxpool(out, cfg.layer2.pool)
        return relu(out).reshape(len(out), -1)

    tc = _train_block_config(cfg.classifier.train, seed)
    model = train_mlp(encode(mixed_train), data.labeled.labels, tc,
                      hidden=cfg.classifier.hidden,
                      classes=data.train.num_classes)
    return 1.0 - evaluate(model, encode(mixed_test), data.test.labels)


def _grid_supervised_accuracy(cfg, data, feats_train, feats_test,
                              mix_trainable, seed, conv1=None) -> float:
    """Supervised second layer (optionally with a supervised first layer)."""
    cn = cfg.connections
    n_maps = feats_train.shape[1] if conv1 is None else conv1[0]
    scheme = build_group_scheme(n_maps, cn.group_size)
    feat_hw = (feats_train.shape[2] if conv1 is None
               else conv1[1])
    stack = build_connection_network(
        n_maps, n_maps, scheme, kg=cn.kg, s2=cn.s2, pool_size=cn.pool,
        hidden=cn.hidden, classes=data.train.num_classes,
        dropout=cn.train.dropout, feat_hw=feat_hw, seed=seed,
        mix_trainable=mix_trainable,
        init_matrix=None if mix_trainable else np.eye(n_maps),
    )
    layers = stack.layers
    if conv1 is not None:
        k1, hw1, filters = conv1
        front = [ConvLayer(filters, stride=cfg.layer1.stride, trainable=True)]
        if cfg.layer1.pool:
            front.append(MaxPoolLayer(cfg.layer1.pool))
        front.append(ReLULayer())
        layers = front + layers
        x_train, x_test = data.labeled.images, data.test.images
        from .preprocess import gcn

        x_train, x_test = gcn(x_train), gcn(x_test)
    else:
        x_train, x_test = feats_train, feats_test
    net = Network(layers)
    fit_network(net, x_train, data.labeled.labels,
                _train_block_config(cn.train, seed))
    pred = net.forward(np.asarray(x_test, np.float32), train=False).argmax(axis=1)
    return float((pred == data.test.labels).mean())


GRID_ROWS = (
    ("supervised", "supervised", "supervised"),
    ("unsupervised", "random", "supervised"),
    ("unsupervised", "random", "unsupervised"),
    ("unsupervised", "supervised", "supervised"),
    ("unsupervised", "supervised", "unsupervised"),
)


def run_table1_grid(cfg: ExperimentConfig, rows=GRID_ROWS) -> MetricsReport:
    """Evaluate layer/connection learning combinations under shared seeds."""
    report = MetricsReport()
    seeds = cfg.grid.seeds if cfg.grid is not None else [0]
    for seed in seeds:
        data = load_dataset(cfg)
        c = data.train.images.shape[1]
        dictionary = _train_dictionary(data.unlabeled_images, cfg.layer1.dict,
                                       c, seed)
        feats_train = layer1_maps(cfg, data.labeled.images, dictionary, 1.0,
                                  chunk=cfg.encode_chunk)
        feats_test = layer1_maps(cfg, data.test.images, dictionary, 1.0,
                                 chunk=cfg.encode_chunk)
        conn_learned = None
        for row in rows:
            first, connection, second = row
            t0 = time.perf_counter()
            if first == "supervised":
                rng = np.random.default_rng(seed)
                filters = _uniform_init(
                    rng,
                    (cfg.layer1.dict.k, c, cfg.layer1.dict.s, cfg.layer1.dict.s),
                    c * cfg.layer1.dict.s ** 2,
                )
                hw = feats_train.shape[2]
                acc = _grid_supervised_accuracy(
                    cfg, data, feats_train, feats_test,
                    mix_trainable=(connection == "supervised"), seed=seed,
                    conv1=(cfg.layer1.dict.k, hw, filters),
                )
            elif second == "supervised":
                acc = _grid_supervised_accuracy(
                    cfg, data, feats_train, feats_test,
                    mix_trainable=(connection == "supervised"), seed=seed,
                )
            else:
                if connection == "supervised":
                    if conn_learned is None:
                        cn = cfg.connections
                        scheme = build_group_scheme(dictionary.k, cn.group_size)
                        conn_learned = train_connections(
                            feats_train, data.labeled.labels, scheme,
                            kg=cn.kg, s2=cn.s2,
                            cfg=_train_block_config(cn.train, seed),
                            hidden=cn.hidden, pool_size=cn.pool,
                            val_fraction=cn.train.val_fraction,
                            patience=cn.train.patience,
                        )
                    conn = conn_learned
                else:
                    conn = identity_connections(dictionary.k)
                acc = _grid_layer2_unsup_accuracy(
                    cfg, data, feats_train, feats_test, conn, seed
                )
            report.add(
                "grid_row", first_layer=first, connection=connection,
                second_layer=second, seed=int(seed), accuracy=float(acc),
                wall_time_s=round(time.perf_counter() - t0, 2),
            )
        conn_learned = None
    report.write_jsonl(_paths(cfg)["metrics"])
    return report


def grid_row_means(report: MetricsReport) -> dict:
    sums, counts = {}, {}
    for entry in report.records:
        if entry["record"] != "grid_row":
            continue
        key = (entry["first_layer"], entry["connection"], entry["second_layer"])
        sums[key] = sums.get(key, 0.0) + entry["accuracy"]
        counts[key] = counts.get(key, 0) + 1
    return {key: sums[key] / counts[key] for key in sums}
