#pragma once

#include "nbann/baselines.hpp"
#include "nbann/common.hpp"
#include "nbann/corpus.hpp"
#include "nbann/harness.hpp"
#include "nbann/io.hpp"
#include "nbann/metrics.hpp"
#include "nbann/model.hpp"
#include "nbann/neighbors.hpp"
#include "nbann/optim.hpp"
#include "nbann/report.hpp"
#include "nbann/synth.hpp"
