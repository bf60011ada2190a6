#pragma once

#include "dpshap/common.hpp"
#include "dpshap/dataset.hpp"
#include "dpshap/experiment.hpp"
#include "dpshap/iforest.hpp"
#include "dpshap/lof.hpp"
#include "dpshap/metrics.hpp"
#include "dpshap/privacy.hpp"
#include "dpshap/scorer.hpp"
#include "dpshap/shap.hpp"
