#pragma once

#include "bilevel/adjoint.hpp"
#include "bilevel/diagnostics.hpp"
#include "bilevel/experiment.hpp"
#include "bilevel/grid.hpp"
#include "bilevel/lower.hpp"
#include "bilevel/model.hpp"
#include "bilevel/observe.hpp"
#include "bilevel/operators.hpp"
#include "bilevel/reference.hpp"
#include "bilevel/spaces.hpp"
#include "bilevel/types.hpp"
#include "bilevel/upper.hpp"
