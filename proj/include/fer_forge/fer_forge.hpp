#pragma once

#include "fer_forge/rng.hpp"
#include "fer_forge/tensor.hpp"
#include "fer_forge/layers.hpp"
#include "fer_forge/optim.hpp"
#include "fer_forge/models.hpp"
#include "fer_forge/model_io.hpp"
#include "fer_forge/data.hpp"
#include "fer_forge/synthetic.hpp"
#include "fer_forge/train.hpp"
#include "fer_forge/tree.hpp"
#include "fer_forge/image.hpp"
#include "fer_forge/facedetect.hpp"
#include "fer_forge/gradcheck.hpp"
#include "fer_forge/manifest.hpp"
