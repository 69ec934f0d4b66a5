"""SE(3)-equivariant voxel convolutions and a rotation-equivariant 3D Unet."""

from .so3 import (
    CGTensor,
    Irrep,
    Path,
    PathTable,
    RepLayout,
    Rotation,
    WignerBlock,
    clebsch_gordan,
    cube_rotations,
    irrep_dim,
    rep_matrix,
    scalar_layout,
    selection_paths,
    spherical_harmonics,
    tensor_product_reduce,
    wigner_d,
)
from .kernel import (
    RadialBasis,
    SteerableKernelBasis,
    assemble_kernel,
    count_parameters,
    default_r_max,
    export_plain_kernel,
    radial_basis_values,
    sample_kernel_basis,
    smooth_finite,
    sus,
)
from .field import (
    LabelVolume,
    VoxelField,
    add_fields,
    concat_fields,
    convolve,
    equivariant_instance_norm,
    equivariant_maxpool,
    gate,
    rotate_field_exact,
    rotate_labels_exact,
    rotate_volume_interp,
    self_connection,
    trilinear_upsample,
)
from .autodiff import BranchPins, Tape, Var
from .net import (
    Network,
    ParameterStore,
    UnetConfig,
    build_network,
    build_unet,
    export_network,
    forward,
    load_config,
    parameter_count,
    save_config,
)
from .train import (
    AdamState,
    TrainConfig,
    adam_step,
    backward,
    dice_score,
    predict_volume,
    softmax_cross_entropy,
    train,
)
from .data import (
    SyntheticSpec,
    generate_synthetic_case,
    load_checkpoint,
    load_dataset,
    make_dataset,
    read_volume,
    save_checkpoint,
    save_dataset,
    write_volume,
    zscore,
)

__version__ = "0.1.0"
