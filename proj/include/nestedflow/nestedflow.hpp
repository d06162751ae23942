#pragma once

// Umbrella header for the whole library.

#include "nestedflow/checkpoint.hpp"
#include "nestedflow/coupling.hpp"
#include "nestedflow/data.hpp"
#include "nestedflow/errors.hpp"
#include "nestedflow/eval.hpp"
#include "nestedflow/experiment.hpp"
#include "nestedflow/flow.hpp"
#include "nestedflow/grad.hpp"
#include "nestedflow/linalg.hpp"
#include "nestedflow/models.hpp"
#include "nestedflow/nested_dropout.hpp"
#include "nestedflow/optim.hpp"
#include "nestedflow/pca.hpp"
#include "nestedflow/rng.hpp"
#include "nestedflow/transforms.hpp"
