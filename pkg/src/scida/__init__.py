"""Single- to multi-label domain adaptation with label-wise self-correction."""
