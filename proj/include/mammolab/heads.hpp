#pragma once

// Downstream task heads over frozen encoders: Faster R-CNN-style detection,
// UNet-style segmentation, linear-probe classification, and VQA fusion.

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mammolab/autograd.hpp"
#include "mammolab/corpus.hpp"
#include "mammolab/encoders.hpp"
#include "mammolab/evalstats.hpp"
#include "mammolab/nn.hpp"
#include "mammolab/preprocess.hpp"

namespace mammolab {

// ---------------------------------------------------------------- protocols

struct DetectionProtocol {
    double nms_iou = 0.5;
    double score_threshold = 0.5;
    double learning_rate = 1e-3;
    std::size_t batch = 8;
    std::size_t validate_every = 500;
    std::size_t patience = 20;
    std::size_t max_steps = 2000;
    std::size_t pre_nms_topk = 64;
    std::size_t post_nms_topk = 32;
    std::size_t fpn_channels = 16;
    std::size_t roi_side = 7;
    std::size_t n_classes = 2;  // foreground classes; background is implicit
    std::size_t input_side = 64;
};

struct SegmentationProtocol {
    double learning_rate = 1e-3;
    std::size_t batch = 8;
    std::size_t validate_every = 500;
    std::size_t patience = 20;
    std::size_t max_steps = 2000;
    std::size_t decoder_channels = 16;
    std::size_t input_side = 64;
};

struct ClassifyProtocol {
    bool frozen = true;
    double learning_rate = 1e-3;
    std::size_t batch = 64;
    std::size_t patience = 10;
    std::size_t max_epochs = 200;
    std::size_t input_side = 64;
};

struct VQAProtocol {
    double learning_rate = 1e-3;
    std::size_t batch = 16;
    std::size_t patience = 1;
    std::size_t max_epochs = 40;
    std::size_t question_embed_width = 16;
    std::size_t hidden = 64;
    std::size_t input_side = 64;
};

// ----------------------------------------------------------- shared pieces

struct TrainLogEntry {
    std::size_t step = 0;
    double train_loss = 0;
    double val_score = std::numeric_limits<double>::quiet_NaN();
};

// Tracks the best validation score; training halts once `patience`
// validations pass without improvement.
struct EarlyStopper {
    std::size_t patience;
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_index = 0;
    std::size_t seen = 0;

    explicit EarlyStopper(std::size_t patience) : patience(patience) {}

    bool observe(double score) {
        const bool improved = score > best;
        if (improved) {
            best = score;
            best_index = seen;
        }
        ++seen;
        return improved;
    }

    bool exhausted() const { return seen > best_index + patience; }
};

using ParamSnapshot = std::vector<std::vector<double>>;

inline ParamSnapshot snapshot_params(const nn::ParamStore& ps) {
    ParamSnapshot snap;
    snap.reserve(ps.params.size());
    for (const auto& [_, p] : ps.params) snap.push_back(p->val.v);
    return snap;
}

inline void restore_params(nn::ParamStore& ps, const ParamSnapshot& snap) {
    for (std::size_t i = 0; i < ps.params.size(); ++i) ps.params[i].second->val.v = snap[i];
}

// Input side S maps to pyramid target sides (S/4, S/8, S/16, S/32), rounded.
inline std::array<std::size_t, 4> pyramid_target_sides(std::size_t input_side) {
    std::array<std::size_t, 4> out;
    for (int i = 0; i < 4; ++i) {
        const std::size_t d = std::size_t{4} << i;
        out[i] = std::max<std::size_t>(1, (input_side + d / 2) / d);
    }
    return out;
}

inline std::array<ag::Var, 4> adapt_pyramid(const VarEncoderOutput& out,
                                            std::size_t input_side) {
    const auto sides = pyramid_target_sides(input_side);
    std::array<ag::Var, 4> adapted;
    for (int i = 0; i < 4; ++i)
        adapted[i] = ag::bilinear_resize(out.pyramid[i], sides[i], sides[i]);
    return adapted;
}

inline std::array<ag::Tensor, 4> adapt_pyramid(const EncoderOutput& out,
                                               std::size_t input_side) {
    VarEncoderOutput v;
    v.embedding = ag::constant(out.embedding);
    for (int i = 0; i < 4; ++i) v.pyramid[i] = ag::constant(out.pyramid[i]);
    auto adapted = adapt_pyramid(v, input_side);
    std::array<ag::Tensor, 4> plain;
    for (int i = 0; i < 4; ++i) plain[i] = adapted[i]->val;
    return plain;
}

// Balanced accuracy restricted to classes present in the truth vector, so
// validation scores stay defined on small splits.
inline double balanced_accuracy_present(const std::vector<int>& truth,
                                        const std::vector<int>& pred) {
    std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // hits, support
    for (std::size_t i = 0; i < truth.size(); ++i) {
        auto& [hits, support] = per_class[truth[i]];
        support += 1;
        hits += truth[i] == pred[i];
    }
    if (per_class.empty()) throw EmptySample();
    double s = 0;
    for (const auto& [_, hs] : per_class) s += double(hs.first) / double(hs.second);
    return s / double(per_class.size());
}

// --------------------------------------------------------------------- NMS

// Indices of kept boxes, sorted by descending score; keeps a box only if its
// IoU with every previously kept box is <= iou_thresh.
inline std::vector<std::size_t> nms(const std::vector<BoundingBox>& boxes,
                                    const std::vector<double>& scores, double iou_thresh) {
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    std::vector<std::size_t> keep;
    for (std::size_t i : order) {
        bool ok = true;
        for (std::size_t j : keep)
            if (box_iou(boxes[i], boxes[j]) > iou_thresh) {
                ok = false;
                break;
            }
        if (ok) keep.push_back(i);
    }
    return keep;
}

// ---------------------------------------------------------------- FPN head

struct FPN {
    std::size_t channels;
    std::vector<nn::Conv> laterals;  // 1x1
    std::vector<nn::Conv> smooths;   // 3x3

    FPN(nn::ParamStore& ps, const std::string& name, const std::array<std::size_t, 4>& in_ch,
        std::size_t channels, Rng& rng)
        : channels(channels) {
        for (int i = 0; i < 4; ++i) {
            laterals.emplace_back(ps, name + ".lat" + std::to_string(i), in_ch[i], channels, 1,
                                  1, 0, rng);
            smooths.emplace_back(ps, name + ".smooth" + std::to_string(i), channels, channels,
                                 3, 1, 1, rng);
        }
    }

    std::array<ag::Var, 4> forward(const std::array<ag::Var, 4>& levels) const {
        std::array<ag::Var, 4> lat;
        for (int i = 0; i < 4; ++i) lat[i] = laterals[i](levels[i]);
        std::array<ag::Var, 4> out;
        ag::Var top = lat[3];
        out[3] = smooths[3](top);
        for (int i = 2; i >= 0; --i) {
            top = ag::add(lat[i], ag::bilinear_resize(top, lat[i]->val.dim(1),
                                                      lat[i]->val.dim(2)));
            out[i] = smooths[i](top);
        }
        return out;
    }
};

// ---------------------------------------------------------------- detector

struct Detection {
    BoundingBox box;
    double score = 0;
};

namespace detail {

struct Anchor {
    double cy, cx, side;
};

inline std::vector<Anchor> level_anchors(std::size_t feat_side, std::size_t input_side) {
    const double stride = double(input_side) / double(feat_side);
    std::vector<Anchor> anchors;
    anchors.reserve(feat_side * feat_side);
    for (std::size_t r = 0; r < feat_side; ++r)
        for (std::size_t c = 0; c < feat_side; ++c)
            anchors.push_back({(double(r) + 0.5) * stride, (double(c) + 0.5) * stride,
                               4.0 * stride});
    return anchors;
}

inline BoundingBox anchor_box(const Anchor& a) {
    return {a.cx - a.side / 2, a.cy - a.side / 2, a.cx + a.side / 2, a.cy + a.side / 2, 0};
}

inline BoundingBox decode_box(const Anchor& a, double ty, double tx, double th, double tw,
                              double input_side) {
    const double cy = a.cy + ty * a.side;
    const double cx = a.cx + tx * a.side;
    const double h = a.side * std::exp(std::clamp(th, -4.0, 4.0));
    const double w = a.side * std::exp(std::clamp(tw, -4.0, 4.0));
    BoundingBox b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, 0};
    b.x1 = std::clamp(b.x1, 0.0, input_side);
    b.y1 = std::clamp(b.y1, 0.0, input_side);
    b.x2 = std::clamp(b.x2, b.x1 + 1e-3, input_side);
    b.y2 = std::clamp(b.y2, b.y1 + 1e-3, input_side);
    return b;
}

inline std::array<double, 4> encode_box(const Anchor& a, const BoundingBox& gt) {
    const double gcy = 0.5 * (gt.y1 + gt.y2), gcx = 0.5 * (gt.x1 + gt.x2);
    return {(gcy - a.cy) / a.side, (gcx - a.cx) / a.side, std::log(gt.height() / a.side),
            std::log(gt.width() / a.side)};
}

}  // namespace detail

struct Detector {
    DetectionProtocol proto;
    nn::ParamStore params;
    std::unique_ptr<FPN> fpn;
    std::unique_ptr<nn::Conv> rpn_shared;
    std::unique_ptr<nn::Conv> rpn_obj;    // 1 channel
    std::unique_ptr<nn::Conv> rpn_delta;  // 4 channels
    std::unique_ptr<nn::Dense> roi_fc;
    std::unique_ptr<nn::Dense> roi_cls;  // n_classes + 1, background last
    std::unique_ptr<nn::Dense> roi_box;  // class-agnostic refinement

    Detector(const DetectionProtocol& proto, const std::array<std::size_t, 4>& encoder_channels,
             std::uint64_t seed)
        : proto(proto) {
        Rng rng(derive_seed(seed, 0xDE7));
        fpn = std::make_unique<FPN>(params, "fpn", encoder_channels, proto.fpn_channels, rng);
        rpn_shared = std::make_unique<nn::Conv>(params, "rpn.shared", proto.fpn_channels,
                                                proto.fpn_channels, 3, 1, 1, rng);
        rpn_obj = std::make_unique<nn::Conv>(params, "rpn.obj", proto.fpn_channels, 1, 1, 1, 0,
                                             rng);
        rpn_delta = std::make_unique<nn::Conv>(params, "rpn.delta", proto.fpn_channels, 4, 1, 1,
                                               0, rng);
        const std::size_t roi_feat = proto.fpn_channels * proto.roi_side * proto.roi_side;
        roi_fc = std::make_unique<nn::Dense>(params, "roi.fc", roi_feat, 64, rng, 0.02);
        roi_cls = std::make_unique<nn::Dense>(params, "roi.cls", 64, proto.n_classes + 1, rng,
                                              0.02);
        roi_box = std::make_unique<nn::Dense>(params, "roi.box", 64, 4, rng, 0.02);
    }

    struct Forward {
        std::array<ag::Var, 4> fpn_maps;
        std::array<ag::Var, 4> obj;    // [1, S_i, S_i]
        std::array<ag::Var, 4> delta;  // [4, S_i, S_i]
    };

    Forward forward_rpn(const std::array<ag::Var, 4>& adapted) const {
        Forward f;
        f.fpn_maps = fpn->forward(adapted);
        for (int i = 0; i < 4; ++i) {
            ag::Var shared = ag::gelu((*rpn_shared)(f.fpn_maps[i]));
            f.obj[i] = (*rpn_obj)(shared);
            f.delta[i] = (*rpn_delta)(shared);
        }
        return f;
    }

    // Decoded proposals ordered by descending objectness, after per-level
    // top-k and cross-level NMS.
    std::vector<Detection> proposals(const Forward& f) const {
        std::vector<BoundingBox> boxes;
        std::vector<double> scores;
        for (int lvl = 0; lvl < 4; ++lvl) {
            const std::size_t side = f.obj[lvl]->val.dim(1);
            const auto anchors = detail::level_anchors(side, proto.input_side);
            std::vector<std::size_t> order(anchors.size());
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return f.obj[lvl]->val[a] > f.obj[lvl]->val[b];
            });
            const std::size_t take = std::min(proto.pre_nms_topk, order.size());
            const std::size_t hw = side * side;
            for (std::size_t i = 0; i < take; ++i) {
                const std::size_t a = order[i];
                boxes.push_back(detail::decode_box(
                    anchors[a], f.delta[lvl]->val[0 * hw + a], f.delta[lvl]->val[1 * hw + a],
                    f.delta[lvl]->val[2 * hw + a], f.delta[lvl]->val[3 * hw + a],
                    double(proto.input_side)));
                scores.push_back(f.obj[lvl]->val[a]);
            }
        }
        std::vector<Detection> out;
        for (std::size_t i : nms(boxes, scores, proto.nms_iou)) {
            if (out.size() >= proto.post_nms_topk) break;
            out.push_back({boxes[i], scores[i]});
        }
        return out;
    }

    ag::Var roi_features(const std::array<ag::Var, 4>& fpn_maps, const BoundingBox& box) const {
        // pool from the finest level; its stride is input_side / side0
        const ag::Var& level = fpn_maps[0];
        const double scale = double(level->val.dim(1)) / double(proto.input_side);
        ag::Var crop = ag::crop_resize(level, box.y1 * scale, box.x1 * scale, box.y2 * scale,
                                       box.x2 * scale, proto.roi_side);
        return ag::reshape(crop, {1, proto.fpn_channels * proto.roi_side * proto.roi_side});
    }

    std::vector<Detection> predict(const std::array<ag::Var, 4>& adapted) const {
        Forward f = forward_rpn(adapted);
        auto props = proposals(f);
        std::vector<BoundingBox> boxes;
        std::vector<double> scores;
        for (const auto& p : props) {
            ag::Var feat = ag::gelu((*roi_fc)(roi_features(f.fpn_maps, p.box)));
            ag::Var cls = ag::softmax_rows((*roi_cls)(feat));
            ag::Var delta = (*roi_box)(feat);
            std::size_t best = 0;
            for (std::size_t c = 1; c <= proto.n_classes; ++c)
                if (cls->val[c] > cls->val[best]) best = c;
            if (best == proto.n_classes) continue;  // background wins
            if (cls->val[best] < proto.score_threshold) continue;
            const double h = p.box.height(), w = p.box.width();
            const double cy = 0.5 * (p.box.y1 + p.box.y2) + delta->val[0] * h;
            const double cx = 0.5 * (p.box.x1 + p.box.x2) + delta->val[1] * w;
            const double nh = h * std::exp(std::clamp(delta->val[2], -2.0, 2.0));
            const double nw = w * std::exp(std::clamp(delta->val[3], -2.0, 2.0));
            BoundingBox b{cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2, int(best)};
            b.x1 = std::clamp(b.x1, 0.0, double(proto.input_side));
            b.y1 = std::clamp(b.y1, 0.0, double(proto.input_side));
            b.x2 = std::clamp(b.x2, b.x1 + 1e-3, double(proto.input_side));
            b.y2 = std::clamp(b.y2, b.y1 + 1e-3, double(proto.input_side));
            boxes.push_back(b);
            scores.push_back(cls->val[best]);
        }
        std::vector<Detection> out;
        // class-wise NMS
        for (std::size_t c = 0; c < proto.n_classes; ++c) {
            std::vector<BoundingBox> cb;
            std::vector<double> cs;
            for (std::size_t i = 0; i < boxes.size(); ++i)
                if (boxes[i].class_id == int(c)) {
                    cb.push_back(boxes[i]);
                    cs.push_back(scores[i]);
                }
            for (std::size_t i : nms(cb, cs, proto.nms_iou)) out.push_back({cb[i], cs[i]});
        }
        std::sort(out.begin(), out.end(),
                  [](const Detection& a, const Detection& b) { return a.score > b.score; });
        return out;
    }
};

namespace detail {

struct DetectionSample {
    std::array<ag::Tensor, 4> adapted;  // frozen-encoder features at target sides
    std::vector<BoundingBox> gt;        // scaled to input_side, class_id set
};

inline std::array<ag::Var, 4> as_vars(const std::array<ag::Tensor, 4>& t) {
    std::array<ag::Var, 4> v;
    for (int i = 0; i < 4; ++i) v[i] = ag::constant(t[i]);
    return v;
}

inline std::vector<BoundingBox> scale_boxes(const ImageRecord& rec, std::size_t input_side) {
    std::vector<BoundingBox> out;
    const double sy = double(input_side) / double(rec.pixels.rows);
    const double sx = double(input_side) / double(rec.pixels.cols);
    for (const auto& b : rec.boxes)
        out.push_back({b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy, b.class_id});
    return out;
}

inline ag::Var detection_loss(Detector& det, const DetectionSample& sample, Rng& rng) {
    auto f = det.forward_rpn(as_vars(sample.adapted));
    const double S = double(det.proto.input_side);

    ag::Var loss = ag::constant(ag::Tensor({1}, {0.0}));

    // RPN targets per level
    for (int lvl = 0; lvl < 4; ++lvl) {
        const std::size_t side = f.obj[lvl]->val.dim(1);
        const auto anchors = detail::level_anchors(side, det.proto.input_side);
        const std::size_t hw = side * side;

        std::vector<double> best_iou(anchors.size(), 0.0);
        std::vector<int> best_gt(anchors.size(), -1);
        std::vector<std::size_t> gt_best_anchor(sample.gt.size(), 0);
        std::vector<double> gt_best_iou(sample.gt.size(), -1.0);
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            const BoundingBox ab = anchor_box(anchors[a]);
            for (std::size_t g = 0; g < sample.gt.size(); ++g) {
                const double iou = box_iou(ab, sample.gt[g]);
                if (iou > best_iou[a]) {
                    best_iou[a] = iou;
                    best_gt[a] = int(g);
                }
                if (iou > gt_best_iou[g]) {
                    gt_best_iou[g] = iou;
                    gt_best_anchor[g] = a;
                }
            }
        }
        std::vector<char> positive(anchors.size(), 0);
        for (std::size_t a = 0; a < anchors.size(); ++a)
            if (best_gt[a] >= 0 && best_iou[a] >= 0.5) positive[a] = 1;
        for (std::size_t g = 0; g < sample.gt.size(); ++g)
            if (gt_best_iou[g] > 0.0) {
                positive[gt_best_anchor[g]] = 1;
                best_gt[gt_best_anchor[g]] = int(g);
            }

        std::vector<std::size_t> obj_idx;
        std::vector<double> obj_target;
        std::vector<std::size_t> delta_idx;
        std::vector<double> delta_target;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            if (positive[a]) {
                obj_idx.push_back(a);
                obj_target.push_back(1.0);
                const auto t = encode_box(anchors[a], sample.gt[best_gt[a]]);
                for (int k = 0; k < 4; ++k) {
                    delta_idx.push_back(std::size_t(k) * hw + a);
                    delta_target.push_back(t[k]);
                }
            } else if (best_iou[a] < 0.3) {
                obj_idx.push_back(a);
                obj_target.push_back(0.0);
            }
        }
        if (!obj_idx.empty()) {
            // cap negatives at 4x positives to keep the objectness loss balanced
            std::size_t n_pos = 0;
            for (double t : obj_target) n_pos += t > 0.5;
            if (n_pos > 0 && obj_idx.size() > 5 * n_pos) {
                std::vector<std::size_t> keep_idx;
                std::vector<double> keep_target;
                std::vector<std::size_t> neg_positions;
                for (std::size_t i = 0; i < obj_idx.size(); ++i) {
                    if (obj_target[i] > 0.5) {
                        keep_idx.push_back(obj_idx[i]);
                        keep_target.push_back(1.0);
                    } else {
                        neg_positions.push_back(i);
                    }
                }
                for (std::size_t i = neg_positions.size(); i > 1; --i)
                    std::swap(neg_positions[i - 1], neg_positions[rand_index(rng, i)]);
                for (std::size_t i = 0; i < std::min(neg_positions.size(), 4 * n_pos); ++i) {
                    keep_idx.push_back(obj_idx[neg_positions[i]]);
                    keep_target.push_back(0.0);
                }
                obj_idx = std::move(keep_idx);
                obj_target = std::move(keep_target);
            }
            ag::Var logits = ag::gather(f.obj[lvl], obj_idx);
            ag::Tensor tgt({obj_target.size()}, obj_target);
            loss = ag::add(loss, ag::bce_with_logits(logits, tgt));
        }
        if (!delta_idx.empty()) {
            ag::Var d = ag::gather(f.delta[lvl], delta_idx);
            loss = ag::add(loss, ag::smooth_l1(d, ag::Tensor({delta_target.size()},
                                                             delta_target)));
        }
    }

    // RoI head on proposals plus ground truth
    auto props = det.proposals(f);
    std::vector<BoundingBox> rois;
    for (const auto& p : props) rois.push_back(p.box);
    for (const auto& g : sample.gt) rois.push_back(g);

    std::vector<ag::Var> feats;
    std::vector<int> labels;
    std::vector<std::size_t> fg_rows;
    std::vector<double> fg_targets;
    for (const auto& roi : rois) {
        double best = 0;
        int gt_i = -1;
        for (std::size_t g = 0; g < sample.gt.size(); ++g) {
            const double iou = box_iou(roi, sample.gt[g]);
            if (iou > best) {
                best = iou;
                gt_i = int(g);
            }
        }
        feats.push_back(det.roi_features(f.fpn_maps, roi));
        if (gt_i >= 0 && best >= 0.5) {
            labels.push_back(sample.gt[gt_i].class_id);
            const auto& gt = sample.gt[gt_i];
            fg_rows.push_back(feats.size() - 1);
            const double h = roi.height(), w = roi.width();
            fg_targets.push_back((0.5 * (gt.y1 + gt.y2) - 0.5 * (roi.y1 + roi.y2)) / h);
            fg_targets.push_back((0.5 * (gt.x1 + gt.x2) - 0.5 * (roi.x1 + roi.x2)) / w);
            fg_targets.push_back(std::log(gt.height() / h));
            fg_targets.push_back(std::log(gt.width() / w));
        } else {
            labels.push_back(int(det.proto.n_classes));  // background
        }
    }
    if (!feats.empty()) {
        std::vector<ag::Var> rows;
        for (auto& ft : feats) rows.push_back(ag::reshape(ft, {ft->val.size()}));
        ag::Var stacked = ag::gelu((*det.roi_fc)(ag::stack_rows(rows)));
        loss = ag::add(loss, ag::cross_entropy((*det.roi_cls)(stacked), labels));
        if (!fg_rows.empty()) {
            ag::Var deltas = (*det.roi_box)(stacked);
            std::vector<std::size_t> flat;
            for (std::size_t r : fg_rows)
                for (std::size_t k = 0; k < 4; ++k) flat.push_back(r * 4 + k);
            loss = ag::add(loss, ag::smooth_l1(ag::gather(deltas, flat),
                                               ag::Tensor({fg_targets.size()}, fg_targets)));
        }
    }
    return loss;
}

}  // namespace detail

struct DetectorResult {
    std::unique_ptr<Detector> detector;
    std::vector<TrainLogEntry> log;
    double best_val_iou = 0;
};

// Per ground-truth box, max IoU over predictions; per-image mean over GTs.
// Images without ground truth are skipped.
inline std::vector<double> eval_detection_features(
    Detector& det, const std::vector<detail::DetectionSample>& samples) {
    std::vector<double> per_image;
    for (const auto& s : samples) {
        if (s.gt.empty()) continue;
        auto preds = det.predict(detail::as_vars(s.adapted));
        double sum = 0;
        for (const auto& gt : s.gt) {
            double best = 0;
            for (const auto& p : preds) best = std::max(best, box_iou(gt, p.box));
            sum += best;
        }
        per_image.push_back(sum / double(s.gt.size()));
    }
    return per_image;
}

namespace detail {

inline std::vector<DetectionSample> cache_detection(Encoder& encoder,
                                                    const std::vector<const ImageRecord*>& recs,
                                                    std::size_t input_side) {
    std::vector<DetectionSample> out;
    for (const ImageRecord* r : recs) {
        DetectionSample s;
        s.adapted = adapt_pyramid(encoder.encode(resize(r->pixels, input_side)), input_side);
        s.gt = scale_boxes(*r, input_side);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace detail

inline DetectorResult train_detector(Encoder& encoder, const Manifest& manifest,
                                     const SplitAssignment& split,
                                     const DetectionProtocol& proto, std::uint64_t seed) {
    auto train = records_in_split(manifest, split, Split::train);
    auto val = records_in_split(manifest, split, Split::val);
    if (train.empty()) throw EmptyTrainSplit();
    bool any_boxes = false;
    for (const auto* r : train) any_boxes |= !r->boxes.empty();
    if (!any_boxes) throw NoBoxAnnotations();

    DetectionProtocol eff = proto;
    eff.input_side = encoder.input_side_for(proto.input_side);
    auto train_cache = detail::cache_detection(encoder, train, eff.input_side);
    auto val_cache = detail::cache_detection(encoder, val, eff.input_side);

    // train only on images that carry boxes; background-only images add no
    // RoI signal at this scale
    std::vector<std::size_t> boxed;
    for (std::size_t i = 0; i < train_cache.size(); ++i)
        if (!train_cache[i].gt.empty()) boxed.push_back(i);

    std::array<std::size_t, 4> enc_channels;
    for (int i = 0; i < 4; ++i) enc_channels[i] = train_cache[0].adapted[i].dim(0);

    DetectorResult result;
    result.detector = std::make_unique<Detector>(eff, enc_channels, seed);
    Detector& det = *result.detector;
    nn::AdamW opt(nn::AdamW::vars_of(det.params), proto.learning_rate);

    EarlyStopper stopper(proto.patience);
    ParamSnapshot best = snapshot_params(det.params);
    for (std::size_t step = 0; step < proto.max_steps; ++step) {
        Rng rng(derive_seed(seed, 0xDE000 + step));
        opt.zero_grad();
        ag::Var loss = ag::constant(ag::Tensor({1}, {0.0}));
        for (std::size_t b = 0; b < proto.batch; ++b) {
            const auto& s = train_cache[boxed[rand_index(rng, boxed.size())]];
            loss = ag::add(loss, detail::detection_loss(det, s, rng));
        }
        loss = ag::scale(loss, 1.0 / double(proto.batch));
        ag::backward(loss);
        opt.step();

        TrainLogEntry entry{step, loss->val[0]};
        if ((step + 1) % proto.validate_every == 0 || step + 1 == proto.max_steps) {
            const auto& pool = val_cache.empty() ? train_cache : val_cache;
            auto ious = eval_detection_features(det, pool);
            entry.val_score = ious.empty() ? 0.0 : mean_of(ious);
            if (stopper.observe(entry.val_score)) best = snapshot_params(det.params);
            result.log.push_back(entry);
            if (stopper.exhausted()) break;
        } else {
            result.log.push_back(entry);
        }
    }
    restore_params(det.params, best);
    result.best_val_iou = stopper.best;
    return result;
}

inline std::vector<double> eval_detection(Encoder& encoder, Detector& det,
                                          const std::vector<const ImageRecord*>& records) {
    return eval_detection_features(
        det, detail::cache_detection(encoder, records, det.proto.input_side));
}

// --------------------------------------------------------------- segmenter

// DiceLoss(p, y) = 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps).
inline ag::Var dice_loss(const ag::Var& probs, const ag::Tensor& target, double eps = 1.0) {
    if (probs->val.size() != target.size()) throw ShapeMismatch("dice target shape");
    ag::Var inter = ag::sum_all(ag::mul(probs, ag::constant(target)));
    double tsum = 0;
    for (double t : target.v) tsum += t;
    ag::Var denom = ag::add_scalar(ag::sum_all(probs), tsum + eps);
    ag::Var ratio = ag::mul(ag::scale(ag::add_scalar(inter, eps / 2.0), 2.0),
                            ag::reciprocal(denom));
    return ag::add_scalar(ag::scale(ratio, -1.0), 1.0);
}

struct Segmenter {
    SegmentationProtocol proto;
    nn::ParamStore params;
    std::unique_ptr<FPN> fpn;
    std::vector<nn::Conv> ups;  // 3x3 refinement after each upsample-merge
    std::unique_ptr<nn::Conv> out_conv;

    Segmenter(const SegmentationProtocol& proto,
              const std::array<std::size_t, 4>& encoder_channels, std::uint64_t seed)
        : proto(proto) {
        Rng rng(derive_seed(seed, 0x5E6));
        fpn = std::make_unique<FPN>(params, "dec", encoder_channels, proto.decoder_channels,
                                    rng);
        for (int i = 0; i < 3; ++i)
            ups.emplace_back(params, "up" + std::to_string(i), proto.decoder_channels,
                             proto.decoder_channels, 3, 1, 1, rng);
        out_conv = std::make_unique<nn::Conv>(params, "out", proto.decoder_channels, 1, 1, 1, 0,
                                              rng);
    }

    // logits [1, S, S]
    ag::Var forward_logits(const std::array<ag::Var, 4>& adapted) const {
        auto maps = fpn->forward(adapted);
        ag::Var d = maps[3];
        for (int i = 2; i >= 0; --i) {
            d = ag::bilinear_resize(d, maps[i]->val.dim(1), maps[i]->val.dim(2));
            d = ag::gelu(ups[std::size_t(2 - i)](ag::add(d, maps[i])));
        }
        d = ag::bilinear_resize(d, proto.input_side, proto.input_side);
        return (*out_conv)(d);
    }

    Image predict(const std::array<ag::Var, 4>& adapted) const {
        ag::Var logits = forward_logits(adapted);
        Image mask(proto.input_side, proto.input_side, 0);
        for (std::size_t i = 0; i < mask.px.size(); ++i)
            mask.px[i] = logits->val[i] > 0.0 ? 255 : 0;
        return mask;
    }
};

namespace detail {

struct SegmentationSample {
    std::array<ag::Tensor, 4> adapted;
    ag::Tensor mask01;  // [S*S], values 0/1
    Image mask_image;
};

inline std::vector<SegmentationSample> cache_segmentation(
    Encoder& encoder, const std::vector<const ImageRecord*>& recs, std::size_t input_side) {
    std::vector<SegmentationSample> out;
    for (const ImageRecord* r : recs) {
        if (!r->mask) continue;
        SegmentationSample s;
        s.adapted = adapt_pyramid(encoder.encode(resize(r->pixels, input_side)), input_side);
        Image full = *r->mask;  // stored 0/1; spread to 0/255 so resize interpolates
        for (auto& p : full.px) p = p ? 255 : 0;
        s.mask_image = resize(full, input_side);
        for (auto& p : s.mask_image.px) p = p >= 128 ? 255 : 0;
        s.mask01 = ag::Tensor({input_side * input_side});
        for (std::size_t i = 0; i < s.mask_image.px.size(); ++i)
            s.mask01[i] = s.mask_image.px[i] != 0 ? 1.0 : 0.0;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace detail

struct SegmenterResult {
    std::unique_ptr<Segmenter> segmenter;
    std::vector<TrainLogEntry> log;
    double best_val_dice = 0;
};

inline std::vector<double> eval_segmentation_features(
    Segmenter& seg, const std::vector<detail::SegmentationSample>& samples) {
    std::vector<double> per_image;
    for (const auto& s : samples) {
        Image pred = seg.predict(detail::as_vars(s.adapted));
        per_image.push_back(dice_and_iou(pred, s.mask_image).dice);
    }
    return per_image;
}

inline SegmenterResult train_segmenter(Encoder& encoder, const Manifest& manifest,
                                       const SplitAssignment& split,
                                       const SegmentationProtocol& proto, std::uint64_t seed) {
    auto train = records_in_split(manifest, split, Split::train);
    auto val = records_in_split(manifest, split, Split::val);
    if (train.empty()) throw EmptyTrainSplit();
    SegmentationProtocol eff = proto;
    eff.input_side = encoder.input_side_for(proto.input_side);
    auto train_cache = detail::cache_segmentation(encoder, train, eff.input_side);
    auto val_cache = detail::cache_segmentation(encoder, val, eff.input_side);
    if (train_cache.empty()) throw NoMasks();

    std::array<std::size_t, 4> enc_channels;
    for (int i = 0; i < 4; ++i) enc_channels[i] = train_cache[0].adapted[i].dim(0);

    SegmenterResult result;
    result.segmenter = std::make_unique<Segmenter>(eff, enc_channels, seed);
    Segmenter& seg = *result.segmenter;
    nn::AdamW opt(nn::AdamW::vars_of(seg.params), proto.learning_rate);

    EarlyStopper stopper(proto.patience);
    ParamSnapshot best = snapshot_params(seg.params);
    for (std::size_t step = 0; step < proto.max_steps; ++step) {
        Rng rng(derive_seed(seed, 0x5E000 + step));
        opt.zero_grad();
        ag::Var loss = ag::constant(ag::Tensor({1}, {0.0}));
        for (std::size_t b = 0; b < proto.batch; ++b) {
            const auto& s = train_cache[rand_index(rng, train_cache.size())];
            ag::Var logits = ag::reshape(seg.forward_logits(detail::as_vars(s.adapted)),
                                         {proto.input_side * proto.input_side});
            ag::Var bce = ag::bce_with_logits(logits, s.mask01);
            ag::Var dice = dice_loss(ag::sigmoid(logits), s.mask01, 1.0);
            loss = ag::add(loss, ag::add(bce, dice));
        }
        loss = ag::scale(loss, 1.0 / double(proto.batch));
        ag::backward(loss);
        opt.step();

        TrainLogEntry entry{step, loss->val[0]};
        if ((step + 1) % proto.validate_every == 0 || step + 1 == proto.max_steps) {
            const auto& pool = val_cache.empty() ? train_cache : val_cache;
            auto dices = eval_segmentation_features(seg, pool);
            entry.val_score = dices.empty() ? 0.0 : mean_of(dices);
            if (stopper.observe(entry.val_score)) best = snapshot_params(seg.params);
            result.log.push_back(entry);
            if (stopper.exhausted()) break;
        } else {
            result.log.push_back(entry);
        }
    }
    restore_params(seg.params, best);
    result.best_val_dice = stopper.best;
    return result;
}

inline std::vector<double> eval_segmentation(Encoder& encoder, Segmenter& seg,
                                             const std::vector<const ImageRecord*>& records) {
    return eval_segmentation_features(
        seg, detail::cache_segmentation(encoder, records, seg.proto.input_side));
}

// ------------------------------------------------------------ linear probe

struct Probe {
    std::string task;
    ClassifyProtocol proto;
    nn::ParamStore params;
    std::unique_ptr<nn::Dense> head;
    std::size_t n_classes = 0;

    Probe(const std::string& task, const ClassifyProtocol& proto, std::size_t embed_dim,
          std::size_t n_classes, std::uint64_t seed)
        : task(task), proto(proto), n_classes(n_classes) {
        Rng rng(derive_seed(seed, 0xC1A));
        head = std::make_unique<nn::Dense>(params, "probe", embed_dim, n_classes, rng, 0.02);
    }

    // softmax scores for one embedding
    std::vector<double> scores(const ag::Tensor& embedding) const {
        ag::Var z = ag::softmax_rows(
            (*head)(ag::constant(ag::Tensor({1, embedding.size()}, embedding.v))));
        return z->val.v;
    }

    int predict(const ag::Tensor& embedding) const {
        auto s = scores(embedding);
        return int(std::max_element(s.begin(), s.end()) - s.begin());
    }
};

struct ProbeResult {
    std::unique_ptr<Probe> probe;
    std::vector<TrainLogEntry> log;
    double best_val_bacc = 0;
};

namespace detail {

struct ProbeSample {
    ag::Tensor embedding;
    int label;
};

inline std::vector<ProbeSample> cache_probe(Encoder& encoder,
                                            const std::vector<const ImageRecord*>& recs,
                                            const std::string& task, std::size_t input_side) {
    std::vector<ProbeSample> out;
    for (const ImageRecord* r : recs) {
        auto label = r->label(task);
        if (!label) continue;
        out.push_back({encoder.encode(resize(r->pixels, input_side)).embedding, *label});
    }
    return out;
}

}  // namespace detail

inline ProbeResult train_probe(Encoder& encoder, const Manifest& manifest,
                               const SplitAssignment& split, const std::string& task,
                               const ClassifyProtocol& proto, std::uint64_t seed) {
    const std::size_t n_classes = task_classes(task).size();
    auto train = records_in_split(manifest, split, Split::train);
    auto val = records_in_split(manifest, split, Split::val);
    if (train.empty()) throw EmptyTrainSplit();

    ClassifyProtocol eff = proto;
    eff.input_side = encoder.input_side_for(proto.input_side);
    ParamSnapshot encoder_before = snapshot_params(encoder.params());
    auto train_cache = detail::cache_probe(encoder, train, task, eff.input_side);
    auto val_cache = detail::cache_probe(encoder, val, task, eff.input_side);
    if (train_cache.empty()) throw TaskAbsent(task);
    {
        std::set<int> distinct;
        for (const auto& s : train_cache) distinct.insert(s.label);
        if (distinct.size() < 2) throw TaskDegenerate(task);
    }

    ProbeResult result;
    result.probe = std::make_unique<Probe>(task, eff, train_cache[0].embedding.size(),
                                           n_classes, seed);
    Probe& probe = *result.probe;
    nn::AdamW opt(nn::AdamW::vars_of(probe.params), proto.learning_rate);

    EarlyStopper stopper(proto.patience);
    ParamSnapshot best = snapshot_params(probe.params);
    std::vector<std::size_t> order(train_cache.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < proto.max_epochs; ++epoch) {
        Rng rng(derive_seed(seed, 0xC1000 + epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rand_index(rng, i)]);
        double epoch_loss = 0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += proto.batch) {
            const std::size_t end = std::min(order.size(), start + proto.batch);
            std::vector<ag::Var> rows;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                rows.push_back(ag::constant(train_cache[order[i]].embedding));
                labels.push_back(train_cache[order[i]].label);
            }
            opt.zero_grad();
            ag::Var loss = ag::cross_entropy((*probe.head)(ag::stack_rows(rows)), labels);
            ag::backward(loss);
            opt.step();
            epoch_loss += loss->val[0];
            ++n_batches;
        }
        const auto& pool = val_cache.empty() ? train_cache : val_cache;
        std::vector<int> truth, pred;
        for (const auto& s : pool) {
            truth.push_back(s.label);
            pred.push_back(probe.predict(s.embedding));
        }
        const double bacc = balanced_accuracy_present(truth, pred);
        if (stopper.observe(bacc)) best = snapshot_params(probe.params);
        result.log.push_back({epoch, epoch_loss / double(n_batches), bacc});
        if (stopper.exhausted()) break;
    }
    restore_params(probe.params, best);
    result.best_val_bacc = stopper.best;

    if (proto.frozen) {
        ParamSnapshot encoder_after = snapshot_params(encoder.params());
        if (encoder_after != encoder_before)
            throw ShapeMismatch("frozen encoder parameters changed during probe training");
    }
    return result;
}

struct ProbeEval {
    std::vector<int> truth;
    std::vector<int> pred;
    std::vector<std::vector<double>> scores;
};

inline ProbeEval eval_probe(Encoder& encoder, const Probe& probe,
                            const std::vector<const ImageRecord*>& records) {
    ProbeEval out;
    for (const auto& s :
         detail::cache_probe(encoder, records, probe.task, probe.proto.input_side)) {
        out.truth.push_back(s.label);
        out.scores.push_back(probe.scores(s.embedding));
        const auto& sc = out.scores.back();
        out.pred.push_back(int(std::max_element(sc.begin(), sc.end()) - sc.begin()));
    }
    return out;
}

// -------------------------------------------------------------------- VQA

struct VQAAnswerSpace {
    std::vector<std::string> types;             // question types, fixed order
    std::vector<std::size_t> offsets;           // per-type offset into the union
    std::size_t total = 0;

    VQAAnswerSpace() {
        types = vqa_question_types();
        for (const auto& t : types) {
            offsets.push_back(total);
            total += vqa_answer_classes(t).size();
        }
    }

    std::size_t type_index(const std::string& t) const {
        for (std::size_t i = 0; i < types.size(); ++i)
            if (types[i] == t) return i;
        throw UnknownTask("unknown question type: " + t);
    }

    std::size_t union_id(const std::string& t, int answer) const {
        return offsets[type_index(t)] + std::size_t(answer);
    }

    // additive mask: 0 inside the type's answers, -1e9 outside
    ag::Tensor mask_for(std::size_t type_idx) const {
        ag::Tensor m({total});
        const std::size_t lo = offsets[type_idx];
        const std::size_t hi =
            type_idx + 1 < offsets.size() ? offsets[type_idx + 1] : total;
        for (std::size_t i = 0; i < total; ++i) m[i] = (i >= lo && i < hi) ? 0.0 : -1e9;
        return m;
    }
};

struct VQAHead {
    VQAProtocol proto;
    VQAAnswerSpace space;
    nn::ParamStore params;
    ag::Var qtable;  // [n_types, q_width]
    std::unique_ptr<nn::Dense> fc1;
    std::unique_ptr<nn::Dense> fc2;

    VQAHead(const VQAProtocol& proto, std::size_t embed_dim, std::uint64_t seed)
        : proto(proto) {
        Rng rng(derive_seed(seed, 0x70A));
        qtable = params.add("qtable",
                            nn::trunc_normal({space.types.size(), proto.question_embed_width},
                                             0.02, rng));
        fc1 = std::make_unique<nn::Dense>(params, "fc1",
                                          embed_dim + proto.question_embed_width, proto.hidden,
                                          rng, 0.02);
        fc2 = std::make_unique<nn::Dense>(params, "fc2", proto.hidden, space.total, rng, 0.02);
    }

    // masked logits over the union answer space
    ag::Var logits(const ag::Var& embedding_row, std::size_t type_idx) const {
        ag::Var q = ag::row(qtable, type_idx);
        ag::Var fused = ag::concat_vec(ag::reshape(embedding_row, {embedding_row->val.size()}),
                                       q);
        ag::Var h = ag::gelu((*fc1)(ag::reshape(fused, {1, fused->val.size()})));
        ag::Var raw = (*fc2)(h);
        return ag::add(raw, ag::constant(ag::Tensor({1, space.total},
                                                    space.mask_for(type_idx).v)));
    }

    std::size_t predict_union(const ag::Tensor& embedding, std::size_t type_idx) const {
        ag::Var z = logits(ag::constant(embedding), type_idx);
        return std::size_t(std::max_element(z->val.v.begin(), z->val.v.end()) -
                           z->val.v.begin());
    }
};

struct VQAResult {
    std::unique_ptr<VQAHead> head;
    std::vector<TrainLogEntry> log;
    double best_val_bacc = 0;
};

namespace detail {

struct VQASample {
    ag::Tensor embedding;  // shared per image, duplicated per question
    std::size_t type_idx;
    std::size_t union_answer;
};

inline std::vector<VQASample> cache_vqa(Encoder& encoder,
                                        const std::vector<const ImageRecord*>& recs,
                                        const VQAAnswerSpace& space, std::size_t input_side) {
    std::vector<VQASample> out;
    for (const ImageRecord* r : recs) {
        if (r->qa.empty()) continue;
        ag::Tensor emb = encoder.encode(resize(r->pixels, input_side)).embedding;
        for (const auto& qa : r->qa)
            out.push_back({emb, space.type_index(qa.question_type),
                           space.union_id(qa.question_type, qa.answer_id)});
    }
    return out;
}

}  // namespace detail

inline VQAResult train_vqa(Encoder& encoder, const Manifest& manifest,
                           const SplitAssignment& split, const VQAProtocol& proto,
                           std::uint64_t seed) {
    auto train = records_in_split(manifest, split, Split::train);
    auto val = records_in_split(manifest, split, Split::val);
    if (train.empty()) throw EmptyTrainSplit();

    VQAProtocol eff = proto;
    eff.input_side = encoder.input_side_for(proto.input_side);
    VQAResult result;
    result.head = std::make_unique<VQAHead>(eff, encoder.embedding_dim(), seed);
    VQAHead& head = *result.head;
    auto train_cache = detail::cache_vqa(encoder, train, head.space, eff.input_side);
    auto val_cache = detail::cache_vqa(encoder, val, head.space, eff.input_side);
    if (train_cache.empty()) throw NoQAPairs();

    nn::AdamW opt(nn::AdamW::vars_of(head.params), proto.learning_rate);
    EarlyStopper stopper(proto.patience);
    ParamSnapshot best = snapshot_params(head.params);
    std::vector<std::size_t> order(train_cache.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < proto.max_epochs; ++epoch) {
        Rng rng(derive_seed(seed, 0x70000 + epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rand_index(rng, i)]);
        double epoch_loss = 0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += proto.batch) {
            const std::size_t end = std::min(order.size(), start + proto.batch);
            opt.zero_grad();
            std::vector<ag::Var> rows;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                const auto& s = train_cache[order[i]];
                rows.push_back(head.logits(ag::constant(s.embedding), s.type_idx));
                labels.push_back(int(s.union_answer));
            }
            std::vector<ag::Var> flat;
            for (auto& r : rows) flat.push_back(ag::reshape(r, {r->val.size()}));
            ag::Var loss = ag::cross_entropy(ag::stack_rows(flat), labels);
            ag::backward(loss);
            opt.step();
            epoch_loss += loss->val[0];
            ++n_batches;
        }
        const auto& pool = val_cache.empty() ? train_cache : val_cache;
        std::vector<int> truth, pred;
        for (const auto& s : pool) {
            truth.push_back(int(s.union_answer));
            pred.push_back(int(head.predict_union(s.embedding, s.type_idx)));
        }
        const double bacc = balanced_accuracy_present(truth, pred);
        if (stopper.observe(bacc)) best = snapshot_params(head.params);
        result.log.push_back({epoch, epoch_loss / double(n_batches), bacc});
        if (stopper.exhausted()) break;
    }
    restore_params(head.params, best);
    result.best_val_bacc = stopper.best;
    return result;
}

struct VQAEval {
    std::vector<std::size_t> type_idx;
    std::vector<int> truth;  // union ids
    std::vector<int> pred;
};

inline VQAEval eval_vqa(Encoder& encoder, const VQAHead& head,
                        const std::vector<const ImageRecord*>& records) {
    VQAEval out;
    for (const auto& s :
         detail::cache_vqa(encoder, records, head.space, head.proto.input_side)) {
        out.type_idx.push_back(s.type_idx);
        out.truth.push_back(int(s.union_answer));
        out.pred.push_back(int(head.predict_union(s.embedding, s.type_idx)));
    }
    return out;
}

}  // namespace mammolab
