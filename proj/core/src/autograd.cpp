#include "pseg/autograd.hpp"

namespace pseg {

// Header-only; this TU pins explicit instantiations so ODR issues surface early.
template struct Node<float>;
template struct Node<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace pseg
