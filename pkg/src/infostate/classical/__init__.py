from .model import (
    ClassicalModel,
    CostSpec,
    MarkovChainModel,
    aggregate_chain,
    aggregate_cost,
    bench_bimodal,
    discretize_generator,
    evaluate_cost_mc,
    evaluate_rs_cost_mc,
    lqg_1d,
    path_costs,
    simulate,
)
from .filters import (
    GaussianState,
    InfoState,
    UnnormalizedInfoState,
    cost_via_infostate,
    filter_step,
    innovations,
    kalman_step,
    reference_records,
    rs_filter_step,
    run_filter,
    run_rs_filter,
    write_filter_csv,
)
