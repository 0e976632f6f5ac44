# faults/byzantine_sort/plugin.py
from faults.api import FaultPlugin


class ByzantineSortFault(FaultPlugin):
    """
    Returns a plausible but wrong sort: two unequal elements swapped, or one
    element dropped. Every choice is drawn from the service's seeded
    generator, so a replayed request sequence gives the same wrong answers.
    """

    @property
    def name(self) -> str:
        return "byzantine_sort"

    @property
    def display_name(self) -> str:
        return "Byzantine Sorter"

    @property
    def defaults(self) -> dict:
        return {"probability": 1.0}

    def validate(self, params: dict) -> dict:
        merged = super().validate(params)
        if merged["probability"] > 1.0:
            raise ValueError("byzantine_sort.probability must be within (0, 1]")
        return merged

    def corrupt_sort(self, values, params, service):
        rng = service.rng
        if rng.random() >= params["probability"]:
            return None

        corrupted = list(values)
        if not corrupted:
            return [0]
        if len(set(corrupted)) >= 2 and rng.random() < 0.5:
            i = rng.randrange(len(corrupted))
            j = rng.choice([k for k, v in enumerate(corrupted) if v != corrupted[i]])
            corrupted[i], corrupted[j] = corrupted[j], corrupted[i]
        else:
            del corrupted[rng.randrange(len(corrupted))]
        return corrupted


def register():
    return ByzantineSortFault()
