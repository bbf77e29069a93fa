import numpy as np
import pytest

from slidemil.bagstore import Bag, Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)


def random_bag(rng, n=None, d=None, coords=False, slide_id="S1",
               patient_id="P1", center_id="C1", label=1):
    n = n or int(rng.integers(1, 40))
    d = d or int(rng.integers(1, 20))
    return Bag(
        slide_id=slide_id,
        patient_id=patient_id,
        center_id=center_id,
        label=label,
        features=rng.standard_normal((n, d)).astype(np.float32),
        coords=rng.uniform(0, 1000, (n, 2)).astype(np.float32) if coords else None,
    )


def toy_dataset(rng, n_patients=10, slides_per_patient=1, n=20, d=6,
                labels=None, centers=None):
    bags = []
    for p in range(n_patients):
        label = labels[p] if labels is not None else int(p % 2)
        center = centers[p] if centers is not None else f"C{p % 3}"
        for s in range(slides_per_patient):
            bags.append(
                Bag(
                    slide_id=f"P{p}-S{s}",
                    patient_id=f"P{p}",
                    center_id=center,
                    label=label,
                    features=rng.standard_normal((n, d)).astype(np.float32),
                )
            )
    ds = Dataset(bags=bags, name="toy")
    ds.validate()
    return ds
