#pragma once

#include "common.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "diffusion.hpp"
#include "encoder.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "graph.hpp"
#include "hashmodel.hpp"
#include "index.hpp"
#include "mixup.hpp"
#include "rng.hpp"
#include "trainer.hpp"
