#pragma once

#include "flowmatch/bp_solver.hpp"
#include "flowmatch/common.hpp"
#include "flowmatch/flow_model.hpp"
#include "flowmatch/io.hpp"
#include "flowmatch/learning.hpp"
#include "flowmatch/matcher.hpp"
#include "flowmatch/mcmc.hpp"
#include "flowmatch/oracle.hpp"
#include "flowmatch/saddle.hpp"
