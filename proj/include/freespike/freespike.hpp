#pragma once

#include "freespike/errors.hpp"
#include "freespike/measure.hpp"
#include "freespike/subordination.hpp"
#include "freespike/edge.hpp"
#include "freespike/spike.hpp"
#include "freespike/rmt.hpp"
#include "freespike/io.hpp"
#include "freespike/harness.hpp"
