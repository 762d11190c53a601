# SPDX-License-Identifier: Apache-2.0
"""Python bindings for the mhaseg 3D U-Net segmentation toolkit."""

from ._mhaseg import (  # noqa: F401
    CLASS_NAMES,
    MhasegError,
    ModelConfig,
    UNet3DMHA,
    __version__,
    bce_loss,
    confusion_counts,
    make_subject,
    minmax_normalize,
    parameter_count,
    read_nifti,
    remap_labels,
    report,
    run_cli,
    write_nifti,
)
