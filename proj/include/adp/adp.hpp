#pragma once

#include "adp/autodiff.hpp"
#include "adp/checkpoint.hpp"
#include "adp/config.hpp"
#include "adp/feature_store.hpp"
#include "adp/losses.hpp"
#include "adp/metrics.hpp"
#include "adp/pipeline.hpp"
#include "adp/pretrainer.hpp"
#include "adp/projector.hpp"
#include "adp/refmatch.hpp"
#include "adp/residual.hpp"
#include "adp/scorers.hpp"
#include "adp/synthetic.hpp"
