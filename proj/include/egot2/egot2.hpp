#pragma once

#include "egot2/analysis.hpp"
