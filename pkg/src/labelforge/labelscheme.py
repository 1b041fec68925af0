"""Label taxonomy plus the anatomical metadata the refinement rules consult.

The scheme lives in a JSON file (``scheme_version`` 1)::

    {
      "scheme_version": 1,
      "entry_count": 144,
      "labels":       {"<id>": "<name>", ...},
      "paired":       [[left_id, right_id], ...],
      "singleton":    [id, ...],
      "sex_specific": {"M": [id, ...], "F": [id, ...]},
      "ribs_left":    [12 ids, rib 1 first],
      "ribs_right":   [12 ids, rib 1 first],
      "vertebrae":    [ids, cranial first],
      "sternum":      [ids],
      "body_part_of": {"<id>": ["<part>", ...]},
      "anchors":      {"<part>": [id, ...]},
      "tier_of":      {"<id>": tier},
      "remap_rules":  [[source_id, "<part>", target_id], ...]
    }

``body_part_of`` values may also be a single part name.  A label bound to
several parts may occupy the union of their boxes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import SchemeValidationError

SCHEME_VERSION = 1
BACKGROUND = 0
UNKNOWN_TISSUE = 1
BODY_PARTS = ("head", "neck", "thorax", "abdomen", "pelvis")


@dataclass(frozen=True)
class LabelScheme:
    entries: dict
    paired: tuple = ()
    singleton: frozenset = frozenset()
    sex_specific: dict = field(default_factory=dict)
    ribs_left: tuple = ()
    ribs_right: tuple = ()
    vertebrae: tuple = ()
    sternum: tuple = ()
    body_part_of: dict = field(default_factory=dict)
    anchors_of: dict = field(default_factory=dict)
    tier_of: dict = field(default_factory=dict)
    remap_rules: tuple = ()

    def __contains__(self, label_id):
        return int(label_id) in self.entries

    def __len__(self):
        return len(self.entries)

    def name(self, label_id) -> str:
        try:
            return self.entries[int(label_id)]
        except KeyError:
            raise KeyError(f"label id {label_id} is not in the scheme") from None

    def id_of(self, name) -> int:
        for i, n in self.entries.items():
            if n == name:
                return i
        raise KeyError(f"no label named {name!r}")

    @property
    def anatomical_ids(self):
        return sorted(i for i in self.entries if i not in (BACKGROUND, UNKNOWN_TISSUE))

    @property
    def ribs(self):
        return self.ribs_left + self.ribs_right

    def tier(self, label_id) -> int:
        return self.tier_of.get(int(label_id), 1)

    def to_dict(self) -> dict:
        return {
            "scheme_version": SCHEME_VERSION,
            "entry_count": len(self.entries),
            "labels": {str(k): v for k, v in sorted(self.entries.items())},
            "paired": [list(p) for p in self.paired],
            "singleton": sorted(self.singleton),
            "sex_specific": {k: sorted(v) for k, v in sorted(self.sex_specific.items())},
            "ribs_left": list(self.ribs_left),
            "ribs_right": list(self.ribs_right),
            "vertebrae": list(self.vertebrae),
            "sternum": list(self.sternum),
            "body_part_of": {str(k): list(v) for k, v in sorted(self.body_part_of.items())},
            "anchors": {k: sorted(v) for k, v in sorted(self.anchors_of.items())},
            "tier_of": {str(k): v for k, v in sorted(self.tier_of.items())},
            "remap_rules": [list(r) for r in self.remap_rules],
        }


def _ids(raw, key):
    try:
        return [int(x) for x in raw]
    except (TypeError, ValueError):
        raise SchemeValidationError(key, "expected a list of integer ids") from None


def scheme_from_dict(cfg: dict) -> LabelScheme:
    if cfg.get("scheme_version") != SCHEME_VERSION:
        raise SchemeValidationError("scheme_version", f"expected {SCHEME_VERSION}, got {cfg.get('scheme_version')!r}")
    if "labels" not in cfg:
        raise SchemeValidationError("labels", "missing")
    labels = cfg["labels"]
    entries = {}
    pairs = labels.items() if isinstance(labels, dict) else labels
    for item in pairs:
        try:
            k, name = item
            k = int(k)
        except (TypeError, ValueError):
            raise SchemeValidationError("labels", f"malformed entry {item!r}") from None
        if k in entries:
            raise SchemeValidationError(f"labels.{k}", "duplicate id")
        entries[k] = str(name)
    if len(set(entries.values())) != len(entries):
        seen, dup = set(), None
        for n in entries.values():
            if n in seen:
                dup = n
                break
            seen.add(n)
        raise SchemeValidationError("labels", f"duplicate name {dup!r}")
    declared = cfg.get("entry_count")
    if declared is not None and declared != len(entries):
        raise SchemeValidationError("entry_count", f"declared {declared} but {len(entries)} labels listed")
    if entries.get(BACKGROUND) != "Background":
        raise SchemeValidationError("labels.0", "id 0 must be 'Background'")

    def check(key, ids):
        missing = [i for i in ids if i not in entries]
        if missing:
            raise SchemeValidationError(key, f"references unknown ids {missing}")
        return ids

    paired = []
    for n, p in enumerate(cfg.get("paired", [])):
        ids = check(f"paired[{n}]", _ids(p, f"paired[{n}]"))
        if len(ids) != 2 or ids[0] == ids[1]:
            raise SchemeValidationError(f"paired[{n}]", "expected two distinct ids")
        paired.append(tuple(ids))
    in_pairs = [i for p in paired for i in p]
    if len(set(in_pairs)) != len(in_pairs):
        raise SchemeValidationError("paired", "an id appears in more than one pair")
    singleton = frozenset(check("singleton", _ids(cfg.get("singleton", []), "singleton")))
    overlap = singleton & set(in_pairs)
    if overlap:
        raise SchemeValidationError("singleton", f"ids {sorted(overlap)} are also paired")

    sex_specific = {}
    for sex, ids in cfg.get("sex_specific", {}).items():
        if sex not in ("M", "F"):
            raise SchemeValidationError(f"sex_specific.{sex}", "sex must be 'M' or 'F'")
        sex_specific[sex] = frozenset(check(f"sex_specific.{sex}", _ids(ids, f"sex_specific.{sex}")))

    ribs_left = tuple(check("ribs_left", _ids(cfg.get("ribs_left", []), "ribs_left")))
    ribs_right = tuple(check("ribs_right", _ids(cfg.get("ribs_right", []), "ribs_right")))
    for key, ribs in (("ribs_left", ribs_left), ("ribs_right", ribs_right)):
        if ribs and len(set(ribs)) != 12:
            raise SchemeValidationError(key, f"expected 12 distinct ids, got {len(set(ribs))}")
    if set(ribs_left) & set(ribs_right):
        raise SchemeValidationError("ribs_right", "overlaps ribs_left")
    vertebrae = tuple(check("vertebrae", _ids(cfg.get("vertebrae", []), "vertebrae")))
    sternum = tuple(check("sternum", _ids(cfg.get("sternum", []), "sternum")))

    anchors = {}
    for part, ids in cfg.get("anchors", {}).items():
        anchors[str(part)] = frozenset(check(f"anchors.{part}", _ids(ids, f"anchors.{part}")))
    body_part_of = {}
    for k, parts in cfg.get("body_part_of", {}).items():
        key = f"body_part_of.{k}"
        check(key, [int(k)])
        parts = (parts,) if isinstance(parts, str) else tuple(parts)
        unknown = [p for p in parts if p not in anchors]
        if not parts or unknown:
            raise SchemeValidationError(key, f"unknown body parts {unknown or parts}")
        body_part_of[int(k)] = parts
    tier_of = {}
    for k, t in cfg.get("tier_of", {}).items():
        check(f"tier_of.{k}", [int(k)])
        tier_of[int(k)] = int(t)
    rules = []
    for n, rule in enumerate(cfg.get("remap_rules", [])):
        key = f"remap_rules[{n}]"
        try:
            src, part, tgt = rule
        except (TypeError, ValueError):
            raise SchemeValidationError(key, "expected [source_id, part, target_id]") from None
        check(key, [int(src), int(tgt)])
        if part not in anchors:
            raise SchemeValidationError(key, f"unknown body part {part!r}")
        rules.append((int(src), str(part), int(tgt)))

    return LabelScheme(
        entries=entries, paired=tuple(paired), singleton=singleton, sex_specific=sex_specific,
        ribs_left=ribs_left, ribs_right=ribs_right, vertebrae=vertebrae, sternum=sternum,
        body_part_of=body_part_of, anchors_of=anchors, tier_of=tier_of, remap_rules=tuple(rules),
    )


def load_scheme(path=None) -> LabelScheme:
    """Load and validate a scheme file; `None` loads the bundled default."""
    if path is None:
        text = resources.files("labelforge").joinpath("data/default_scheme.json").read_text()
        source = "default_scheme.json"
    else:
        text = Path(path).read_text()
        source = str(path)
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemeValidationError(source, f"invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise SchemeValidationError(source, "top level must be an object")
    # catch duplicate keys that json.loads would silently collapse
    if isinstance(cfg.get("labels"), dict):
        pairs = json.loads(text, object_pairs_hook=lambda kv: kv)
        top = dict(pairs)
        keys = [k for k, _ in top["labels"]]
        dup = next((k for k in keys if keys.count(k) > 1), None)
        if dup is not None:
            raise SchemeValidationError(f"labels.{dup}", "duplicate id")
    return scheme_from_dict(cfg)


def save_scheme(scheme: LabelScheme, path):
    Path(path).write_text(json.dumps(scheme.to_dict(), indent=2) + "\n")


_DEFAULT = None


def default_scheme() -> LabelScheme:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_scheme()
    return _DEFAULT


def opposite_sex_labels(scheme: LabelScheme, sex) -> frozenset:
    """Labels that cannot occur in a patient of `sex` ('M' or 'F')."""
    if sex == "F":
        return scheme.sex_specific.get("M", frozenset())
    if sex == "M":
        return scheme.sex_specific.get("F", frozenset())
    raise ValueError(f"sex must be 'M' or 'F', got {sex!r}")
