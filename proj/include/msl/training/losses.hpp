#pragma once

#include "msl/model/model.hpp"

namespace msl::training {

struct LossWeights {
  double fusion = 1.0;
  double aux = 1.0;
  double aux_feat = 0.5;
};

template <typename S>
Tensor<S> mae(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b);

// MAE(x_ct, ct_gt) + MAE(x_mri, mri_gt)
template <typename S>
Tensor<S> loss_rec(const Tensor<S>& x_ct, const Tensor<S>& x_mri, const Tensor<S>& ct_gt,
                   const Tensor<S>& mri_gt);
// 1/2 MSE(x_ct, x_mid) + 1/2 MSE(x_mri, x_mid)
template <typename S>
Tensor<S> loss_fusion(const Tensor<S>& x_ct, const Tensor<S>& x_mri, const Tensor<S>& x_mid);
// Same form as loss_rec, applied to the single-modality outputs.
template <typename S>
Tensor<S> loss_aux(const Tensor<S>& aux_ct, const Tensor<S>& aux_mri, const Tensor<S>& ct_gt,
                   const Tensor<S>& mri_gt);
// MAE(intra_CT, inter_MRI2CT) + MAE(intra_MRI, inter_CT2MRI); needs all four groups.
template <typename S>
Tensor<S> loss_aux_feat(const model::TokenGroups<S>& groups);

template <typename S>
struct LossTerms {
  Tensor<S> rec, fusion, aux, aux_feat;
};

template <typename S>
Tensor<S> total_loss(const LossTerms<S>& parts, const LossWeights& w);

}  // namespace msl::training
