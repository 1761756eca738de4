#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mpsae {

enum class errc {
    // data loading / validation
    missing_column,
    non_binary_indicator,
    non_finite_covariate,
    invalid_weight,
    empty_dataset,
    inconsistent_hierarchy,
    // alignment
    covariate_mismatch,
    spec_inconsistent,
    // model fitting
    rank_deficient_design,
    separation,
    inner_no_convergence,
    dimension_mismatch,
    // estimation
    unknown_domain,
    fit_missing,
    incompatible_spec,
    missing_indicator_value,
    empty_domain,
    // uncertainty
    bootstrap_fit_failure,
    insufficient_sample,
    zero_estimate,
    // oracle
    wrong_arity,
    too_large_to_enumerate,
    quadrature_underflow,
    // simulation / config
    invalid_config,
    sample_too_large,
    excess_failures,
};

inline std::string_view errc_name(errc c) {
    switch (c) {
    case errc::missing_column: return "MissingColumn";
    case errc::non_binary_indicator: return "NonBinaryIndicator";
    case errc::non_finite_covariate: return "NonFiniteCovariate";
    case errc::invalid_weight: return "InvalidWeight";
    case errc::empty_dataset: return "EmptyDataset";
    case errc::inconsistent_hierarchy: return "InconsistentHierarchy";
    case errc::covariate_mismatch: return "CovariateMismatch";
    case errc::spec_inconsistent: return "SpecInconsistent";
    case errc::rank_deficient_design: return "RankDeficientDesign";
    case errc::separation: return "Separation";
    case errc::inner_no_convergence: return "InnerNoConvergence";
    case errc::dimension_mismatch: return "DimensionMismatch";
    case errc::unknown_domain: return "UnknownDomain";
    case errc::fit_missing: return "FitMissing";
    case errc::incompatible_spec: return "IncompatibleSpec";
    case errc::missing_indicator_value: return "MissingIndicatorValue";
    case errc::empty_domain: return "EmptyDomain";
    case errc::bootstrap_fit_failure: return "BootstrapFitFailure";
    case errc::insufficient_sample: return "InsufficientSample";
    case errc::zero_estimate: return "ZeroEstimate";
    case errc::wrong_arity: return "WrongArity";
    case errc::too_large_to_enumerate: return "TooLargeToEnumerate";
    case errc::quadrature_underflow: return "QuadratureUnderflow";
    case errc::invalid_config: return "InvalidConfig";
    case errc::sample_too_large: return "SampleTooLarge";
    case errc::excess_failures: return "ExcessFailures";
    }
    return "UnknownError";
}

/// Library-wide exception carrying a machine-readable error code.
class Error : public std::runtime_error {
  public:
    Error(errc code, const std::string& message)
        : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

    errc code() const noexcept { return code_; }

  private:
    errc code_;
};

} // namespace mpsae
