"""
Instance files for cross-checking against other implementations.

A directory holds edges.txt ("i j" per line, 0-based, i < j), features.bin and
centroids.bin (16-byte header: 8-byte magic, u32 rows, u32 columns, then
little-endian row-major float64), labels.txt (±1 for the binary model, group
index otherwise) and meta.ini with the parameters and seed.
"""
import configparser
import json
import logging
import os
from typing import Dict

import numpy as np

from .errors import SerializationError
from .model import Graph, Instance, ModelParams
from .multi import MultiParams

logger = logging.getLogger(__name__)

FEATURES_MAGIC = b"CSBMFEAT"
CENTROIDS_MAGIC = b"CSBMCENT"
HEADER_BYTES = 16

EDGES_FILE = "edges.txt"
FEATURES_FILE = "features.bin"
CENTROIDS_FILE = "centroids.bin"
LABELS_FILE = "labels.txt"
META_FILE = "meta.ini"


def _write_matrix(path: str, magic: bytes, matrix: np.ndarray) -> None:
    rows, cols = matrix.shape
    header = magic + np.array([rows, cols], dtype="<u4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


def _read_matrix(path: str, magic: bytes) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < HEADER_BYTES or data[:8] != magic:
        raise SerializationError(f"{path}: missing {magic.decode()} header")
    rows, cols = (int(x) for x in np.frombuffer(data[8:HEADER_BYTES], dtype="<u4"))
    body = np.frombuffer(data[HEADER_BYTES:], dtype="<f8")
    if body.size != rows * cols:
        raise SerializationError(f"{path}: header says {rows} x {cols} but found {body.size} values")
    return body.reshape(rows, cols).astype(np.float64)


def write_instance(instance: Instance, directory: str) -> Dict[str, str]:
    """
    Write ``instance`` under ``directory`` (created if needed).

    Returns:
        {file kind: path}
    """
    os.makedirs(directory, exist_ok=True)
    paths = {
        "edges": os.path.join(directory, EDGES_FILE),
        "features": os.path.join(directory, FEATURES_FILE),
        "centroids": os.path.join(directory, CENTROIDS_FILE),
        "labels": os.path.join(directory, LABELS_FILE),
        "meta": os.path.join(directory, META_FILE),
    }
    with open(paths["edges"], "w", encoding="utf-8") as f:
        for i, j in instance.graph.edges:
            f.write(f"{i} {j}\n")
    _write_matrix(paths["features"], FEATURES_MAGIC, instance.features)
    centroids = np.asarray(instance.centroids).reshape(instance.feature_dim, -1)
    _write_matrix(paths["centroids"], CENTROIDS_MAGIC, centroids)

    labels = instance.spins if instance.embedding == "antipodal" else instance.groups
    with open(paths["labels"], "w", encoding="utf-8") as f:
        f.write("\n".join(str(int(x)) for x in labels))
        f.write("\n")

    meta = configparser.ConfigParser()
    meta["instance"] = {
        "seed": str(instance.seed),
        "embedding": instance.embedding,
        "kind": "multi" if isinstance(instance.params, MultiParams) else "binary",
        "n_nodes": str(instance.n_nodes),
    }
    meta["params"] = {key: json.dumps(value) for key, value in instance.params.to_dict().items()}
    with open(paths["meta"], "w", encoding="utf-8") as f:
        meta.write(f)
    logger.info("Wrote instance (N=%d, |E|=%d) to %s", instance.n_nodes, instance.graph.num_edges, directory)
    return paths


def _read_params(meta: configparser.ConfigParser):
    raw = {key: json.loads(value) for key, value in meta["params"].items()}
    if meta["instance"].get("kind") == "multi":
        return MultiParams(**raw)
    return ModelParams(**raw)


def read_instance(directory: str) -> Instance:
    """
    Load an instance written by write_instance.

    Raises:
        SerializationError: on a bad header, missing metadata or inconsistent shapes.
    """
    meta = configparser.ConfigParser()
    meta_path = os.path.join(directory, META_FILE)
    if not meta.read(meta_path, encoding="utf-8") or "instance" not in meta or "params" not in meta:
        raise SerializationError(f"{meta_path}: missing or incomplete metadata")
    try:
        params = _read_params(meta)
        seed = int(meta["instance"]["seed"])
        embedding = meta["instance"]["embedding"]
    except (KeyError, TypeError, ValueError) as e:
        raise SerializationError(f"{meta_path}: {e}")
    n = params.n_nodes

    edges = np.loadtxt(os.path.join(directory, EDGES_FILE), dtype=np.int64, ndmin=2).reshape(-1, 2)
    graph = Graph.from_edges(n, edges)

    features = _read_matrix(os.path.join(directory, FEATURES_FILE), FEATURES_MAGIC)
    if features.shape != (params.feature_dim, n):
        raise SerializationError(f"features are {features.shape}, expected {(params.feature_dim, n)}")
    features = np.asfortranarray(features)
    centroids = _read_matrix(os.path.join(directory, CENTROIDS_FILE), CENTROIDS_MAGIC)
    if embedding == "antipodal":
        centroids = centroids[:, 0].copy()

    labels = np.loadtxt(os.path.join(directory, LABELS_FILE), dtype=np.int64, ndmin=1)
    if labels.shape != (n,):
        raise SerializationError(f"labels hold {labels.size} entries, expected {n}")
    groups = (1 - labels) // 2 if embedding == "antipodal" else labels

    for a in (features, centroids, groups):
        a.setflags(write=False)
    return Instance(graph, features, groups, centroids, params, seed, embedding)
