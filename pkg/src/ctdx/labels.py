"""Label vocabulary shared across the pipeline."""

COVID = "COVID"
NON_COVID = "NON_COVID"

#: CT-level diagnosis labels, in canonical (sorted) order.
CT_LABELS = (COVID, NON_COVID)

#: Column order of every 3-class slice probability vector.
SLICE_CLASSES = ("covid", "pneumonia", "healthy")

# Slice filter outcomes (see aggregate.filter_slices).
HEALTHY = "HEALTHY"
LESION = "LESION"


def check_ct_label(label: str) -> str:
    if label not in CT_LABELS:
        raise ValueError(f"unknown CT label {label!r}; expected one of {CT_LABELS}")
    return label
