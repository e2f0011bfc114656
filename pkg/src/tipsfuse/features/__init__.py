"""Data handling: radiomics names, ROI volumes, patient datasets, synthetic cohorts."""
from .dataset import (
    CLINICAL_GROUPS,
    PRESSURE_GROUP,
    ClinicalItem,
    DataError,
    Normalizer,
    Outcomes,
    PatientDataset,
    PatientRecord,
    assign_splits,
    fit_apply_normalization,
    load_dataset,
    write_dataset,
)
from .radiomics import (
    GroupIndex,
    RadiomicsFeature,
    RadiomicsNameError,
    build_group_index,
    make_feature,
    parse_radiomics_name,
    reference_names,
)
from .synthetic import SyntheticSpec, SyntheticTruth, generate_synthetic
from .volume import LabelVolume, crop_roi, dilate_labels, pad_or_crop
