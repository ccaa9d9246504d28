#pragma once

#include "zipcount/blockgrid.hpp"
#include "zipcount/gradcheck.hpp"
#include "zipcount/io.hpp"
#include "zipcount/losses.hpp"
#include "zipcount/metrics.hpp"
#include "zipcount/refmodel.hpp"
#include "zipcount/synth.hpp"
#include "zipcount/tensor.hpp"
#include "zipcount/zipdist.hpp"
