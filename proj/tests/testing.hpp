#pragma once

// Torch's logging header defines CHECK; doctest's takes over in tests.
#include <torch/torch.h>
#undef CHECK
#include "doctest.h"
