#include "msl/training/losses.hpp"

#include <stdexcept>

namespace msl::training {

template <typename S>
Tensor<S> mae(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mae: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return reduce_mean(abs(a - b));
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return reduce_mean(square(a - b));
}

template <typename S>
Tensor<S> loss_rec(const Tensor<S>& x_ct, const Tensor<S>& x_mri, const Tensor<S>& ct_gt,
                   const Tensor<S>& mri_gt) {
  return mae(x_ct, ct_gt) + mae(x_mri, mri_gt);
}

template <typename S>
Tensor<S> loss_fusion(const Tensor<S>& x_ct, const Tensor<S>& x_mri, const Tensor<S>& x_mid) {
  return (mse(x_ct, x_mid) + mse(x_mri, x_mid)) * S(0.5);
}

template <typename S>
Tensor<S> loss_aux(const Tensor<S>& aux_ct, const Tensor<S>& aux_mri, const Tensor<S>& ct_gt,
                   const Tensor<S>& mri_gt) {
  return loss_rec(aux_ct, aux_mri, ct_gt, mri_gt);
}

template <typename S>
Tensor<S> loss_aux_feat(const model::TokenGroups<S>& groups) {
  using model::Group;
  for (int g = 0; g < model::kGroupCount; ++g) {
    if (!groups.groups[g].defined()) {
      throw std::invalid_argument(std::string("loss_aux_feat: missing group ") +
                                  model::group_name(static_cast<Group>(g)));
    }
  }
  return mae(groups[Group::IntraCT], groups[Group::InterMRI2CT]) +
         mae(groups[Group::IntraMRI], groups[Group::InterCT2MRI]);
}

template <typename S>
Tensor<S> total_loss(const LossTerms<S>& parts, const LossWeights& w) {
  return parts.rec + parts.fusion * static_cast<S>(w.fusion) + parts.aux * static_cast<S>(w.aux) +
         parts.aux_feat * static_cast<S>(w.aux_feat);
}

#define MSL_INSTANTIATE(S)                                                                          \
  template Tensor<S> mae(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> mse(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> loss_rec(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&); \
  template Tensor<S> loss_fusion(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> loss_aux(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&); \
  template Tensor<S> loss_aux_feat(const model::TokenGroups<S>&);                                  \
  template Tensor<S> total_loss(const LossTerms<S>&, const LossWeights&);

MSL_INSTANTIATE(float)
MSL_INSTANTIATE(double)

}  // namespace msl::training
