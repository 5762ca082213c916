#include "fiberseg/pipeline.hpp"

namespace fiberseg {

Segmentation segment_otsu(const Volume& gray) {
  const auto t = otsu_threshold(gray);
  return {binarize(gray, t.threshold), t.threshold};
}

Segmentation segment_best_threshold(const Volume& gray, const LabelVolume& gt) {
  const auto t = best_dice_threshold(gray, gt);
  return {binarize(gray, t.threshold), t.threshold};
}

Segmentation segment_frangi(const Volume& train_gray, const LabelVolume& train_labels, const Volume& eval_gray,
                            const FrangiParams& params) {
  const Volume train_v = frangi_vesselness(normalize(train_gray), params);
  const auto t = best_dice_threshold(train_v, train_labels);
  const Volume eval_v = frangi_vesselness(normalize(eval_gray), params);
  return {binarize(eval_v, t.threshold), t.threshold};
}

ForestRun segment_forest(const Volume& train_gray, const LabelVolume& train_labels, const Volume& eval_gray,
                         const ForestConfig& cfg, std::span<const double> scales) {
  ForestRun run;
  {
    const FeatureStack train = compute_feature_stack(normalize(train_gray), scales);
    run.forest = train_forest(train, train_labels, cfg);
  }
  const FeatureStack eval = compute_feature_stack(normalize(eval_gray), scales);
  run.result.seg = forest_predict(run.forest, eval).labels;
  return run;
}

}  // namespace fiberseg
