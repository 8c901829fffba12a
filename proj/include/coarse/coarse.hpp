#pragma once

#include "errors.hpp"
#include "rng.hpp"
#include "numerics.hpp"
#include "tokenizer.hpp"
#include "sequence.hpp"
#include "model.hpp"
#include "data.hpp"
#include "retrieval.hpp"
#include "rankeval.hpp"
#include "train.hpp"
#include "probe.hpp"
#include "synth.hpp"
#include "experiment.hpp"
