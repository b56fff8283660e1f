"""Deterministic toy captioning corpus: region features, captions, detections, triples.

Run ``python -m kgcap.synthetic OUT_DIR`` to write ``dataset.jsonl``,
``triples.jsonl`` and one ``.fvec`` file per image.
"""

from __future__ import annotations

import argparse
import itertools
from pathlib import Path

import numpy as np

from .data import CaptionRecord, FeatureSet, ImageRecord, build_vocabulary, store_features, write_manifest
from .knowledge import KnowledgeCorpus, KnowledgeTriple, write_triples
from .model import ModelConfig, ModelParameters

SUBJECTS = {
    "dog": ("runs", "brown"),
    "cat": ("sleeps", "black"),
    "horse": ("stands", "white"),
    "man": ("walks", "tall"),
    "woman": ("sits", "young"),
    "bird": ("flies", "small"),
    "boy": ("plays", "little"),
    "surfer": ("paddles", "wet"),
}
PLACES = {
    "grass": "on",
    "beach": "on",
    "street": "along",
    "park": "in",
    "lake": "near",
    "sofa": "on",
}
RELATED = {
    "dog": [("RelatedTo", "pet", 0.9), ("CapableOf", "runs", 0.8), ("AtLocation", "park", 0.6), ("HasA", "tail", 0.5)],
    "cat": [("RelatedTo", "pet", 0.9), ("CapableOf", "sleeps", 0.8), ("AtLocation", "sofa", 0.7), ("HasA", "whiskers", 0.4)],
    "horse": [("IsA", "animal", 0.8), ("CapableOf", "stands", 0.7), ("AtLocation", "beach", 0.5)],
    "man": [("IsA", "person", 0.9), ("CapableOf", "walks", 0.8), ("AtLocation", "street", 0.6)],
    "woman": [("IsA", "person", 0.9), ("CapableOf", "sits", 0.7), ("AtLocation", "park", 0.5)],
    "bird": [("IsA", "animal", 0.8), ("CapableOf", "flies", 0.9), ("AtLocation", "lake", 0.6)],
    "boy": [("IsA", "person", 0.8), ("CapableOf", "plays", 0.9), ("AtLocation", "park", 0.7)],
    "surfer": [("RelatedTo", "surfboard", 0.9), ("CapableOf", "paddles", 0.8), ("AtLocation", "beach", 0.8)],
    "grass": [("RelatedTo", "green", 0.9), ("AtLocation", "park", 0.6)],
    "beach": [("RelatedTo", "sand", 0.9), ("RelatedTo", "ocean", 0.8)],
    "street": [("RelatedTo", "road", 0.8), ("RelatedTo", "car", 0.6)],
    "park": [("RelatedTo", "tree", 0.7), ("RelatedTo", "grass", 0.6)],
    "lake": [("RelatedTo", "water", 0.9), ("RelatedTo", "boat", 0.5)],
    "sofa": [("AtLocation", "home", 0.8), ("RelatedTo", "cushion", 0.5)],
}


def synthetic_items(n_images: int, seed: int = 0) -> list[tuple[str, str]]:
    """``n_images`` distinct (subject, place) pairs."""
    pairs = list(itertools.product(SUBJECTS, PLACES))
    if n_images > len(pairs):
        raise ValueError(f"at most {len(pairs)} synthetic images")
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(len(pairs))[:n_images]
    return [pairs[i] for i in sorted(chosen)]


def caption_for(subject: str, place: str) -> str:
    verb, adj = SUBJECTS[subject]
    return f"a {adj} {subject} {verb} {PLACES[place]} the {place}."


def make_synthetic(out_dir, n_images: int = 10, L: int = 6, D: int = 32, seed: int = 0) -> dict[str, Path]:
    if L < 2:
        raise ValueError("synthetic images need at least 2 regions")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    concepts = list(SUBJECTS) + list(PLACES)
    prototypes = {c: rng.normal(size=D) for c in concepts}

    rows = []
    for k, (subject, place) in enumerate(synthetic_items(n_images, seed)):
        regions = [prototypes[subject], prototypes[place]]
        regions += [rng.normal(scale=0.5, size=D) for _ in range(L - 2)]
        matrix = np.stack(regions) + rng.normal(scale=0.05, size=(L, D))
        image_id = f"img{k:03d}"
        rel = Path("features") / f"{image_id}.fvec"
        store_features(FeatureSet(matrix.astype(np.float32)), out / rel)
        distractor = concepts[int(rng.integers(len(concepts)))]
        objects = [
            {"label": subject, "score": round(float(rng.uniform(0.85, 0.99)), 3)},
            {"label": place, "score": round(float(rng.uniform(0.6, 0.8)), 3)},
        ]
        if distractor not in (subject, place):
            objects.append({"label": distractor, "score": round(float(rng.uniform(0.1, 0.3)), 3)})
        rows.append({"id": image_id, "captions": [caption_for(subject, place)], "objects": objects, "features": str(rel)})

    write_manifest(out / "dataset.jsonl", rows)
    triples = [KnowledgeTriple(s, rel, o, w) for s, items in RELATED.items() for rel, o, w in items]
    write_triples(out / "triples.jsonl", triples)
    return {"dataset": out / "dataset.jsonl", "triples": out / "triples.jsonl"}


def tiny_problem(seed: int = 0, hidden: int = 4, tied: bool = True):
    """A 10-token vocabulary, one 2x3 image and one caption: small enough to finite-difference."""
    words = ["a", "dog", "runs", "on", "grass", "park"]
    vocab = build_vocabulary([words], max_size=len(words))
    rng = np.random.default_rng(seed)
    features = FeatureSet(rng.normal(size=(2, 3)))
    caption = CaptionRecord.from_text("a dog runs on grass", vocab)
    record = ImageRecord("tiny", features, [("dog", 0.9)], [caption])
    params = ModelParameters.init(ModelConfig(len(vocab), 3, hidden, None, tied), rng, scale=0.5)
    corpus = KnowledgeCorpus({"park": 0.6, "grass": 0.8})
    return params, vocab, record, caption, corpus


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="write a synthetic captioning corpus")
    parser.add_argument("out", help="output directory")
    parser.add_argument("--images", type=int, default=10)
    parser.add_argument("--regions", type=int, default=6)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    paths = make_synthetic(args.out, args.images, args.regions, args.dim, args.seed)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
