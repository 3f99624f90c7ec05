"""Short-recurrence Krylov subspace recycling for sequences A x = b."""

from .core import (
    BandedMatrix,
    BreakdownError,
    CsrMatrix,
    DimensionMismatch,
    LinearOperator,
    MvCounter,
    PermutationMap,
    adjoint_operator,
    hessenberg_lstsq,
    operator_from_csr,
    reduced_qr,
    spmv,
)
from .report import SolveReport
from .problems import (
    ProblemInstance,
    cond1_estimate,
    gen_cdr3d,
    gen_poisson2d,
    gen_rhs_sequence,
    gen_tridiag,
    read_matrix_market,
    write_matrix_market,
)
from .solvers import (
    BiLanczosData,
    LanczosData,
    bicg_bilanczos,
    rgcr_solve,
    sym_lanczos_solve,
)
from .sridr import (
    SonneveldRecycleData,
    idr_s_solve,
    load_recycle_data,
    mi09_solve,
    save_recycle_data,
    sonneveld_membership_check,
    sridr_solve,
    throw_columns,
)
from .shortrep import (
    ShortRepresentation,
    apply_V,
    apply_VH,
    build_short_rep,
    load_short_rep,
    minres_u_rep,
    rep_from_lanczos,
    reps_from_bilanczos,
    save_short_rep,
    shuffle_permutation,
    srbicg_dual_solve,
    srbicg_solve,
    srcg_solve,
    srmr_solve,
)
from .blocking import (
    BlockedRecycleData,
    blocked_recycle_solve,
    load_blocked_data,
    save_blocked_data,
    split_blocks,
    uniform_block_sizes,
)
from .aposteriori import ApostState, apost_init, apost_step
from .precond import (
    ZLanczosData,
    jacobi_solver,
    rep_from_zlanczos,
    srz_solve,
    symmetric_gauss_seidel_solver,
    wrap_precond,
    z_lanczos,
)
from .harness import ExperimentConfig, run_experiment, summarize

__version__ = "0.1.0"
