#pragma once

// Small-area estimation of composite deprivation headcounts: unit-level
// Bernoulli logit mixed models, Monte Carlo aggregation, and parametric
// bootstrap uncertainty.

#include <mpsae/error.hpp>
#include <mpsae/rng.hpp>
#include <mpsae/parallel.hpp>
#include <mpsae/csv.hpp>
#include <mpsae/indicator.hpp>
#include <mpsae/data.hpp>
#include <mpsae/glmm.hpp>
#include <mpsae/oracle.hpp>
#include <mpsae/estimator.hpp>
#include <mpsae/uncertainty.hpp>
#include <mpsae/simulation.hpp>
#include <mpsae/config.hpp>
