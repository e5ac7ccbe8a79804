#ifndef NORMGRAD_HPP_
#define NORMGRAD_HPP_

#include "normgrad/attribute.hpp"
#include "normgrad/dataset_io.hpp"
#include "normgrad/error.hpp"
#include "normgrad/heatmap.hpp"
#include "normgrad/image_io.hpp"
#include "normgrad/layers.hpp"
#include "normgrad/model_io.hpp"
#include "normgrad/network.hpp"
#include "normgrad/order1.hpp"
#include "normgrad/saliency.hpp"
#include "normgrad/tensor.hpp"
#include "normgrad/trainer.hpp"

#endif // NORMGRAD_HPP_
