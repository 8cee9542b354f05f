#pragma once

#include "pglode/autodiff.hpp"
#include "pglode/binary_io.hpp"
#include "pglode/checkpoint.hpp"
#include "pglode/config.hpp"
#include "pglode/error.hpp"
#include "pglode/grid.hpp"
#include "pglode/log.hpp"
#include "pglode/models.hpp"
#include "pglode/parameters.hpp"
#include "pglode/pipeline.hpp"
#include "pglode/random.hpp"
#include "pglode/svg.hpp"
#include "pglode/synthgen.hpp"
#include "pglode/training.hpp"
#include "pglode/verify.hpp"
