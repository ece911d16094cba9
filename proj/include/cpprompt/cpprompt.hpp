#pragma once

#include "cpprompt/backbone.hpp"
#include "cpprompt/config.hpp"
#include "cpprompt/data.hpp"
#include "cpprompt/dil.hpp"
#include "cpprompt/error.hpp"
#include "cpprompt/evaluation.hpp"
#include "cpprompt/io.hpp"
#include "cpprompt/kmeans.hpp"
#include "cpprompt/ops.hpp"
#include "cpprompt/optim.hpp"
#include "cpprompt/pretrain.hpp"
#include "cpprompt/prompting.hpp"
#include "cpprompt/report.hpp"
#include "cpprompt/strategy.hpp"
#include "cpprompt/tape.hpp"
#include "cpprompt/tensor.hpp"
