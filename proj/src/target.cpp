#include "dis/target.hpp"

#include "dis/errors.hpp"

namespace dis {

Batch TemperedTarget::sample_initial(Rng&, std::size_t) const {
  throw ContractError(name() + " has no exact sampler for its initial density");
}

}  // namespace dis
