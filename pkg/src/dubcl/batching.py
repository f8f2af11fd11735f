"""Hierarchical hard-negative minibatch construction.

A batch of size B is partitioned into G title groups: G titles drawn
uniformly without replacement, then B/G distinct shots from each, so every
instance has B/G - 1 same-title hard negatives. Each quadruplet records its
two snippet windows plus all augmentation draws, making plans replayable
and safe to build ahead of training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featurize import MaskSpans, draw_mask, draw_video_augment, temporal_jitter


@dataclass(frozen=True)
class Quadruplet:
    title_id: int
    shot_id: int
    t_p: float
    t_s: float
    video_p: tuple  # (short-side target, crop row, crop col)
    video_s: tuple
    lang_p: str
    lang_s: str
    mask_p: MaskSpans
    mask_s: MaskSpans


@dataclass(frozen=True)
class BatchPlan:
    quadruplets: tuple
    group_slices: tuple  # (start, stop) per title group
    rng_seed: object     # seed material the plan was drawn from, if known

    def validate(self):
        by_title = {}
        for q in self.quadruplets:
            by_title.setdefault(q.title_id, []).append(q.shot_id)
        sizes = {len(v) for v in by_title.values()}
        if len(sizes) != 1:
            raise AssertionError(f"unequal title groups: {sorted(sizes)}")
        for title_id, shots in by_title.items():
            if len(set(shots)) != len(shots):
                raise AssertionError(f"duplicate shot in title {title_id} group")
        return True


class TitleIndex:
    """Post-filter snippet lists and language sets per title."""

    def __init__(self, entries):
        # entries: list of dicts with title_id, shots [(shot_id, duration_s)],
        # languages (original first), multilingual flag
        self.entries = [e for e in entries if e["shots"]]
        self.n_titles = len(self.entries)
        self.total_snippets = sum(len(e["shots"]) for e in self.entries)

    @classmethod
    def from_manifest(cls, manifest, min_s=3.0, max_s=12.0, title_ids=None):
        entries = []
        for title in manifest.titles:
            if title_ids is not None and title["title_id"] not in title_ids:
                continue
            shots = [
                (s["shot_id"], s["duration_s"])
                for s in title["shots"]
                if min_s <= s["duration_s"] <= max_s
            ]
            entries.append(
                {
                    "title_id": title["title_id"],
                    "shots": shots,
                    "languages": tuple(title["languages"]),
                }
            )
        return cls(entries)

    def restrict(self, language_subset=None, require_multilingual=False):
        """Title-level filters: original language membership, dub availability."""
        kept = []
        for e in self.entries:
            if language_subset is not None and e["languages"][0] not in language_subset:
                continue
            if require_multilingual and len(e["languages"]) < 2:
                continue
            kept.append(e)
        return TitleIndex(kept)

    def title_mass(self):
        return np.array([len(e["shots"]) for e in self.entries], dtype=np.float64)


def sample_batch(index, b, g, rng, dub_augment, aug_cfg, mel_shape, rng_seed=None):
    """Draw one BatchPlan: G uniform titles, B/G distinct shots each, with all
    per-quadruplet augmentation draws resolved."""
    if b % g != 0:
        raise ValueError(f"batch size {b} not divisible by group count {g}")
    s = b // g
    if index.n_titles < g:
        raise ValueError(
            f"need {g} titles with eligible shots, index has {index.n_titles}"
        )
    eligible = [e for e in index.entries if len(e["shots"]) >= s]
    if len(eligible) < g:
        raise ValueError(
            f"need {g} titles with >= {s} eligible shots each, "
            f"only {len(eligible)} qualify"
        )

    n_mels, frames_t = mel_shape
    title_picks = rng.choice(len(eligible), size=g, replace=False)
    quadruplets = []
    slices = []
    for t_pick in title_picks:
        entry = eligible[t_pick]
        langs = entry["languages"]
        shot_picks = rng.choice(len(entry["shots"]), size=s, replace=False)
        start = len(quadruplets)
        for s_pick in shot_picks:
            shot_id, duration = entry["shots"][s_pick]
            t_p, t_s = temporal_jitter(duration, rng, aug_cfg.snippet_len_s)
            video_p = draw_video_augment(rng, aug_cfg)
            video_s = draw_video_augment(rng, aug_cfg)
            lang_p = langs[int(rng.integers(len(langs)))]
            if dub_augment and len(langs) > 1:
                others = [l for l in langs if l != lang_p]
                lang_s = others[int(rng.integers(len(others)))]
            else:
                lang_s = lang_p
            mask_p = draw_mask(rng, n_mels, frames_t, aug_cfg)
            mask_s = draw_mask(rng, n_mels, frames_t, aug_cfg)
            quadruplets.append(
                Quadruplet(
                    title_id=entry["title_id"],
                    shot_id=shot_id,
                    t_p=t_p,
                    t_s=t_s,
                    video_p=video_p,
                    video_s=video_s,
                    lang_p=lang_p,
                    lang_s=lang_s,
                    mask_p=mask_p,
                    mask_s=mask_s,
                )
            )
        slices.append((start, len(quadruplets)))

    return BatchPlan(
        quadruplets=tuple(quadruplets), group_slices=tuple(slices), rng_seed=rng_seed
    )


def easy_negative_probability(index, b):
    """Probability that B iid uniform-over-snippet draws collide on a title.

    Exact birthday computation: P(all B titles distinct) = B! * e_B(p) with
    e_B the elementary symmetric polynomial over the title masses p_n,
    evaluated by dynamic programming.
    """
    from math import factorial

    masses = index.title_mass()
    p = masses / masses.sum()
    e = np.zeros(b + 1)
    e[0] = 1.0
    for pn in p:
        # rhs evaluates against the pre-update coefficients
        e[1 : b + 1] = e[1 : b + 1] + pn * e[0:b]
    return 1.0 - float(factorial(b)) * e[b]
