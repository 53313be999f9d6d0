"""Synthetic corpora at the extraction-record level.

Apps are drawn from latent behaviour profiles. A profile is a pair of
feature groups; each group owns a few APIs, permissions and opcode "methods".
Benign and malicious profiles pair the same groups differently, so every
group is equally common in both classes and the class is only visible
through which groups co-occur. A weak per-feature shift gives linear models
something to find as well. Timestamps span consecutive years.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .apk import ApkStaticFeatures
from .dataset import BENIGN, MALWARE, TimestampedSample
from .features import FeatureList
from .symbols import default_alphabet

BENIGN_PROFILES = ((0, 1), (2, 3), (4, 5))
MALWARE_PROFILES = ((0, 3), (1, 4), (2, 5))


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 5000
    malware_fraction: float = 0.1
    first_year: int = 2021
    n_years: int = 4
    n_groups: int = 6
    group_apis: int = 5
    group_permissions: int = 6
    group_methods: int = 3
    background_methods: int = 60
    methods_per_app: int = 12
    signature_rate: float = 0.8
    background_rate: float = 0.08
    linear_shift: float = 0.05
    seed: int = 0


def _method(rng, symbols):
    body = rng.choice(symbols, size=int(rng.integers(4, 9))).tolist()
    return body + ["RETURN"]


def generate(spec=SyntheticSpec(), api_list=None, permission_list=None):
    """Return ``(records, samples)`` for ``spec.n_samples`` synthetic apps."""
    rng = np.random.default_rng(spec.seed)
    api_names = list((api_list or FeatureList.load("api")).names)
    perm_names = list((permission_list or FeatureList.load("permission")).names)
    symbols = [c for c in default_alphabet().categories if c != "RETURN"]

    api_perm = rng.permutation(len(api_names))
    perm_perm = rng.permutation(len(perm_names))
    n_api_sig = spec.n_groups * spec.group_apis
    n_perm_sig = spec.n_groups * spec.group_permissions
    group_apis = [api_perm[g * spec.group_apis:(g + 1) * spec.group_apis] for g in range(spec.n_groups)]
    group_perms = [perm_perm[g * spec.group_permissions:(g + 1) * spec.group_permissions] for g in range(spec.n_groups)]
    bg_apis = api_perm[n_api_sig:]
    bg_perms = perm_perm[n_perm_sig:]
    group_methods = [[_method(rng, symbols) for _ in range(spec.group_methods)] for _ in range(spec.n_groups)]
    bg_methods = [_method(rng, symbols) for _ in range(spec.background_methods)]

    # weak linear signal: a handful of background features are a bit more
    # common in malware
    shift_apis = set(rng.choice(bg_apis, size=5, replace=False).tolist())
    shift_perms = set(rng.choice(bg_perms, size=5, replace=False).tolist())
    shift_methods = set(rng.choice(len(bg_methods), size=5, replace=False).tolist())

    n = spec.n_samples
    n_mal = int(round(n * spec.malware_fraction))
    labels = np.array([MALWARE] * n_mal + [BENIGN] * (n - n_mal))
    rng.shuffle(labels)
    years = np.repeat(np.arange(spec.n_years), int(np.ceil(n / spec.n_years)))[:n]
    rng.shuffle(years)

    records, samples = [], []
    for i in range(n):
        label = int(labels[i])
        profiles = MALWARE_PROFILES if label == MALWARE else BENIGN_PROFILES
        groups = profiles[int(rng.integers(len(profiles)))]
        shift = spec.linear_shift if label == MALWARE else 0.0

        apis = set()
        perms = set()
        methods = []
        for g in groups:
            apis.update(int(a) for a in group_apis[g] if rng.random() < spec.signature_rate)
            perms.update(int(p) for p in group_perms[g] if rng.random() < spec.signature_rate)
            methods.extend(m for m in group_methods[g] if rng.random() < spec.signature_rate)
        for a in bg_apis:
            if rng.random() < spec.background_rate + (shift if a in shift_apis else 0.0):
                apis.add(int(a))
        for p in bg_perms:
            if rng.random() < spec.background_rate + (shift if p in shift_perms else 0.0):
                perms.add(int(p))
        n_bg = spec.methods_per_app
        probs = np.full(len(bg_methods), 1.0)
        probs[list(shift_methods)] += 20 * shift
        probs /= probs.sum()
        methods.extend(bg_methods[j] for j in rng.choice(len(bg_methods), size=n_bg, p=probs))
        order = rng.permutation(len(methods))
        seq = [s for j in order for s in methods[j]]

        sha = rng.bytes(32).hex()
        year = spec.first_year + int(years[i])
        day = dt.date(year, 1, 1) + dt.timedelta(days=int(rng.integers(0, 365)))
        records.append(ApkStaticFeatures(
            sha,
            seq,
            sorted(f"{api_names[a]}()V" for a in apis),
            sorted(perm_names[p] for p in perms),
            [],
        ))
        source = "uploadDate" if label == BENIGN or rng.random() < 0.2 else "first_submission_date"
        samples.append(TimestampedSample(sha, label, day, source))
    return records, samples
