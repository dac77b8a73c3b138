"""
Class Catalog

The fixed class list of the synthetic world. Ids 0-3 are in-distribution
(two stuff, two thing classes); 4-5 are held-out shapes that never appear in
training images. At evaluation the held-out classes merge into one anomaly
class, which reuses id 4.
"""

from typing import FrozenSet, List

from app.models.schemas import ClassInfo

VOID = 255

CATALOG: List[ClassInfo] = [
    ClassInfo(id=0, name="sky", is_thing=False, is_ood=False),
    ClassInfo(id=1, name="ground", is_thing=False, is_ood=False),
    ClassInfo(id=2, name="circle", is_thing=True, is_ood=False),
    ClassInfo(id=3, name="square", is_thing=True, is_ood=False),
    ClassInfo(id=4, name="triangle", is_thing=True, is_ood=True),
    ClassInfo(id=5, name="cross", is_thing=True, is_ood=True),
]

IND_CLASSES: FrozenSet[int] = frozenset(c.id for c in CATALOG if not c.is_ood)
OOD_CLASSES: FrozenSet[int] = frozenset(c.id for c in CATALOG if c.is_ood)
THING_CLASSES: FrozenSet[int] = frozenset(c.id for c in CATALOG if c.is_thing and not c.is_ood)
STUFF_CLASSES: FrozenSet[int] = frozenset(c.id for c in CATALOG if not c.is_thing)

NUM_IND_CLASSES = len(IND_CLASSES)
ANOMALY_CLASS = NUM_IND_CLASSES
ANOMALY_NAME = "anomaly"


def class_name(class_id: int) -> str:
    if class_id == ANOMALY_CLASS:
        return ANOMALY_NAME
    for info in CATALOG:
        if info.id == class_id:
            return info.name
    return f"class_{class_id}"
