#pragma once

#include "selfinject/backend.hpp"
#include "selfinject/common.hpp"
#include "selfinject/cooccurrence.hpp"
#include "selfinject/dataset_io.hpp"
#include "selfinject/dpo.hpp"
#include "selfinject/http_backend.hpp"
#include "selfinject/injector.hpp"
#include "selfinject/lexicon.hpp"
#include "selfinject/metrics.hpp"
#include "selfinject/orchestrator.hpp"
#include "selfinject/toy_model.hpp"
