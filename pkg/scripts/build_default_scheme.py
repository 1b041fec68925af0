"""Regenerate src/labelforge/data/default_scheme.json from the label table below.

Run from the repo root:  python scripts/build_default_scheme.py
"""
import json
from pathlib import Path

LABELS = """
0 Background
1 Unknown Tissue
2 Muscles
3 Fat
4 Abdominal Tissue
5 Mediastinal Tissue
6 Esophagus
7 Stomach
8 Small Bowel
9 Duodenum
10 Colon
12 Gallbladder
13 Liver
14 Pancreas
15 Kidney Left
16 Kidney Right
17 Bladder
18 Gonads
19 Prostate
20 Uterocervix
21 Uterus
22 Breast Left
23 Breast Right
24 Spinal Canal
25 Brain
26 Spleen
27 Adrenal Gland Left
28 Adrenal Gland Right
29 Thyroid Left
30 Thyroid Right
31 Thymus
32 Gluteus Maximus Left
33 Gluteus Maximus Right
34 Gluteus Medius Left
35 Gluteus Medius Right
36 Gluteus Minimus Left
37 Gluteus Minimus Right
38 Iliopsoas Left
39 Iliopsoas Right
40 Autochthon Left
41 Autochthon Right
42 Skin
43 Vertebrae C1
44 Vertebrae C2
45 Vertebrae C3
46 Vertebrae C4
47 Vertebrae C5
48 Vertebrae C6
49 Vertebrae C7
50 Vertebrae T1
51 Vertebrae T2
52 Vertebrae T3
53 Vertebrae T4
54 Vertebrae T5
55 Vertebrae T6
56 Vertebrae T7
57 Vertebrae T8
58 Vertebrae T9
59 Vertebrae T10
60 Vertebrae T11
61 Vertebrae T12
62 Vertebrae L1
63 Vertebrae L2
64 Vertebrae L3
65 Vertebrae L4
66 Vertebrae L5
67 Costa 1 Left
68 Costa 1 Right
69 Costa 2 Left
70 Costa 2 Right
71 Costa 3 Left
72 Costa 3 Right
73 Costa 4 Left
74 Costa 4 Right
75 Costa 5 Left
76 Costa 5 Right
77 Costa 6 Left
78 Costa 6 Right
79 Costa 7 Left
80 Costa 7 Right
81 Costa 8 Left
82 Costa 8 Right
83 Costa 9 Left
84 Costa 9 Right
85 Costa 10 Left
86 Costa 10 Right
87 Costa 11 Left
88 Costa 11 Right
89 Costa 12 Left
90 Costa 12 Right
91 Rib Cartilage
92 Sternum Corpus
93 Clavicula Left
94 Clavicula Right
95 Scapula Left
96 Scapula Right
97 Humerus Left
98 Humerus Right
99 Skull
100 Hip Left
101 Hip Right
102 Sacrum
103 Femur Left
104 Femur Right
105 Heart
106 Heart Atrium Left
107 Heart Tissue
108 Heart Atrium Right
109 Heart Myocardium
110 Heart Ventricle Left
111 Heart Ventricle Right
112 Iliac Artery Left
113 Iliac Artery Right
114 Aorta
115 Iliac Vena Left
116 Iliac Vena Right
117 Inferior Vena Cava
118 Portal Vein and Splenic Vein
119 Celiac Trunk
120 Lung Lower Lobe Left
121 Lung Upper Lobe Left
122 Lung Lower Lobe Right
123 Lung Middle Lobe Right
124 Lung Upper Lobe Right
125 Bronchus
126 Trachea
127 Pulmonary Artery
128 Cheek Left
129 Cheek Right
130 Eyeball Left
131 Eyeball Right
132 Nasal Cavity
133 Artery Common Carotid Right
134 Artery Common Carotid Left
135 Sternum Manubrium
136 Artery Internal Carotid Right
137 Artery Internal Carotid Left
138 Internal Jugular Vein Right
139 Internal Jugular Vein Left
140 Artery Brachiocephalic
141 Vein Brachiocephalic Right
142 Vein Brachiocephalic Left
143 Artery Subclavian Right
144 Artery Subclavian Left
"""

# Left/right names that are not mirror images across the midsagittal plane,
# or whose halves are physically joined (thyroid isthmus).
NOT_PAIRED = {"Heart Atrium", "Heart Ventricle", "Thyroid"}

SINGLETON_NAMES = [
    "Brain", "Liver", "Spleen", "Stomach", "Pancreas", "Bladder", "Gallbladder",
    "Duodenum", "Heart", "Trachea", "Sternum Corpus", "Sternum Manubrium",
    "Sacrum", "Skull", "Thymus", "Prostate", "Uterus", "Uterocervix",
]

TIER0 = [1, 2, 3, 4, 5, 42, 107]
TIER2 = [
    106, 108, 109, 110, 111,            # heart substructures
    112, 113, 114, 115, 116, 117, 118, 119, 127,
    133, 134, 136, 137, 138, 139, 140, 141, 142, 143, 144,
    125,                                # bronchus
]

# label name -> body parts the label may occupy
BODY_PARTS = {
    "head": ["Brain", "Eyeball Left", "Eyeball Right", "Nasal Cavity", "Cheek Left", "Cheek Right"],
    "neck": ["Thyroid Left", "Thyroid Right"],
    "thorax": [
        "Heart", "Heart Atrium Left", "Heart Atrium Right", "Heart Myocardium",
        "Heart Ventricle Left", "Heart Ventricle Right", "Heart Tissue", "Thymus",
        "Mediastinal Tissue", "Breast Left", "Breast Right", "Bronchus", "Pulmonary Artery",
        "Lung Lower Lobe Left", "Lung Upper Lobe Left", "Lung Lower Lobe Right",
        "Lung Middle Lobe Right", "Lung Upper Lobe Right",
    ],
    "neck+thorax": ["Trachea", "Clavicula Left", "Clavicula Right", "Scapula Left", "Scapula Right"],
    "neck+thorax+abdomen": ["Esophagus"],
    "thorax+abdomen": [
        "Liver", "Spleen", "Stomach", "Adrenal Gland Left", "Adrenal Gland Right",
    ] + [f"Costa {i} {s}" for i in range(1, 13) for s in ("Left", "Right")],
    "abdomen": ["Pancreas", "Duodenum", "Kidney Left", "Kidney Right", "Gallbladder"],
    "abdomen+pelvis": [
        "Colon", "Small Bowel", "Abdominal Tissue", "Iliopsoas Left", "Iliopsoas Right",
        "Iliac Artery Left", "Iliac Artery Right", "Iliac Vena Left", "Iliac Vena Right",
    ],
    "pelvis": [
        "Bladder", "Gonads", "Prostate", "Uterus", "Uterocervix",
        "Gluteus Maximus Left", "Gluteus Maximus Right", "Gluteus Medius Left",
        "Gluteus Medius Right", "Gluteus Minimus Left", "Gluteus Minimus Right",
        "Femur Left", "Femur Right",
    ],
}


def main():
    entries = {}
    for line in LABELS.strip().splitlines():
        num, name = line.split(" ", 1)
        entries[int(num)] = name
    by_name = {v: k for k, v in entries.items()}

    paired = []
    for name, left in sorted(by_name.items(), key=lambda kv: kv[1]):
        if not name.endswith(" Left"):
            continue
        stem = name[: -len(" Left")]
        if stem.rsplit(" ", 1)[0] in NOT_PAIRED or stem in NOT_PAIRED:
            continue
        right = by_name.get(stem + " Right")
        if right is not None:
            paired.append([left, right])

    vertebrae = list(range(43, 67))
    singleton = sorted({by_name[n] for n in SINGLETON_NAMES} | set(vertebrae))

    tier_of = {}
    for i in entries:
        if i == 0:
            continue
        tier_of[str(i)] = 0 if i in TIER0 else 2 if i in TIER2 else 1

    body_part_of = {}
    for parts, names in BODY_PARTS.items():
        for n in names:
            body_part_of[str(by_name[n])] = parts.split("+")

    scheme = {
        "scheme_version": 1,
        "entry_count": len(entries),
        "labels": {str(k): v for k, v in sorted(entries.items())},
        "paired": paired,
        "singleton": singleton,
        "sex_specific": {"M": [by_name["Prostate"]], "F": [by_name["Uterocervix"], by_name["Uterus"]]},
        "ribs_left": [by_name[f"Costa {i} Left"] for i in range(1, 13)],
        "ribs_right": [by_name[f"Costa {i} Right"] for i in range(1, 13)],
        "vertebrae": vertebrae,
        "sternum": [by_name["Sternum Corpus"], by_name["Sternum Manubrium"]],
        "body_part_of": dict(sorted(body_part_of.items(), key=lambda kv: int(kv[0]))),
        "anchors": {
            "head": [by_name["Skull"], by_name["Brain"]],
            "neck": list(range(43, 50)),
            "thorax": list(range(50, 62)) + [by_name["Sternum Corpus"], by_name["Sternum Manubrium"]],
            "abdomen": list(range(62, 67)),
            "pelvis": [by_name["Hip Left"], by_name["Hip Right"], by_name["Sacrum"]],
        },
        "tier_of": tier_of,
        "remap_rules": [
            [by_name["Eyeball Left"], "pelvis", by_name["Gonads"]],
            [by_name["Eyeball Right"], "pelvis", by_name["Gonads"]],
            [by_name["Nasal Cavity"], "abdomen", by_name["Colon"]],
        ],
    }
    out = Path(__file__).resolve().parents[1] / "src" / "labelforge" / "data" / "default_scheme.json"
    out.write_text(json.dumps(scheme, indent=2) + "\n")
    print(f"wrote {out} ({len(entries)} entries, {len(paired)} pairs)")


if __name__ == "__main__":
    main()
