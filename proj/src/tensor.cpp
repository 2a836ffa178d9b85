#include "cfanet/tensor.hpp"

#include <numeric>
#include <sstream>

namespace cfanet {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
  return os.str();
}

template <class T>
Tensor<T>::Tensor(Shape s, std::vector<T> values)
    : shape(s), data(std::move(values)) {
  if (data.size() != shape.numel()) {
    throw InvalidArgument("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape.str());
  }
}

template <class T>
T Tensor<T>::sum() const {
  return std::accumulate(data.begin(), data.end(), T(0));
}

template struct Tensor<float>;
template struct Tensor<double>;

}  // namespace cfanet
