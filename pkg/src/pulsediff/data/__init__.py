from .phantom import PhantomParams, SampleRecord, extract_sketch, generate_phantom, random_params
from .layout import (LayoutError, LabelSetError, CaseDataset, generate_dataset, load_case, load_dataset,
                     write_case)
from .cmr import generate_cmr_volume

__all__ = [
    "PhantomParams", "SampleRecord", "extract_sketch", "generate_phantom", "random_params",
    "LayoutError", "LabelSetError", "CaseDataset", "generate_dataset", "load_case", "load_dataset",
    "write_case", "generate_cmr_volume",
]
