#pragma once

#include "asymptotics.hpp"
#include "conditional.hpp"
#include "covariance.hpp"
#include "dataset.hpp"
#include "family.hpp"
#include "godambe.hpp"
#include "inference.hpp"
#include "io.hpp"
#include "laplace.hpp"
#include "model.hpp"
#include "quadrature.hpp"
#include "random.hpp"
#include "simulation.hpp"
