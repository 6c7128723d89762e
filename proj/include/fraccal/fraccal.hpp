#pragma once

#include "errors.hpp"
#include "log.hpp"
#include "quadrature.hpp"
#include "geometry.hpp"
#include "kernel.hpp"
#include "assembly.hpp"
#include "forward.hpp"
#include "staterec.hpp"
#include "coeffrec.hpp"
#include "plot.hpp"
#include "harness.hpp"
