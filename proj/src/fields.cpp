#include "morphldm/fields.hpp"

#include <ATen/Dispatch.h>

#include <sstream>

namespace morphldm {
namespace {

using torch::autograd::AutogradContext;
using torch::autograd::tensor_list;

std::string shape_str(const torch::Tensor& t) {
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

void check_field(const torch::Tensor& disp, const char* what) {
    if (disp.dim() < 4 || disp.dim() > 5) {
        throw ShapeError(std::string(what) + ": displacement must be [N, D, *S] with D in {2,3}, got " +
                         shape_str(disp));
    }
    const int64_t dims = disp.dim() - 2;
    if (disp.size(1) != dims) {
        throw ShapeError(std::string(what) + ": displacement has " + std::to_string(disp.size(1)) +
                         " channels for " + std::to_string(dims) + " spatial dims");
    }
    if (!disp.is_floating_point()) throw ShapeError(std::string(what) + ": displacement must be floating point");
}

void check_finite(const torch::Tensor& t, const char* what) {
    if (!torch::isfinite(t).all().item<bool>()) {
        throw std::domain_error(std::string(what) + ": non-finite values");
    }
}

kernels::GridShape field_grid(const torch::Tensor& disp) { return grid_shape(spatial_shape(disp)); }

struct WarpFunction : torch::autograd::Function<WarpFunction> {
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& image,
                                 const torch::Tensor& disp) {
        auto img = image.contiguous();
        auto u = disp.contiguous();
        ctx->save_for_backward({img, u});
        const auto grid = field_grid(u);
        auto out = torch::empty_like(img);
        AT_DISPATCH_FLOATING_TYPES(img.scalar_type(), "warp_forward", [&] {
            kernels::parallel::warp_forward<scalar_t>(img.data_ptr<scalar_t>(), u.data_ptr<scalar_t>(),
                                                      out.data_ptr<scalar_t>(), img.size(0),
                                                      img.size(1), grid);
        });
        return out;
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        const auto saved = ctx->get_saved_variables();
        const auto& img = saved[0];
        const auto& u = saved[1];
        auto g = grad_outputs[0].contiguous();
        auto grad_img = torch::empty_like(img);
        auto grad_u = torch::empty_like(u);
        const auto grid = field_grid(u);
        AT_DISPATCH_FLOATING_TYPES(img.scalar_type(), "warp_backward", [&] {
            kernels::parallel::warp_backward<scalar_t>(
                img.data_ptr<scalar_t>(), u.data_ptr<scalar_t>(), g.data_ptr<scalar_t>(),
                grad_img.data_ptr<scalar_t>(), grad_u.data_ptr<scalar_t>(), img.size(0), img.size(1),
                grid);
        });
        return {grad_img, grad_u};
    }
};

struct MagnitudeFunction : torch::autograd::Function<MagnitudeFunction> {
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& disp) {
        auto u = disp.contiguous();
        ctx->save_for_backward({u});
        double value = 0;
        AT_DISPATCH_FLOATING_TYPES(u.scalar_type(), "magnitude_forward", [&] {
            value = kernels::parallel::magnitude_forward<scalar_t>(u.data_ptr<scalar_t>(), u.size(0),
                                                                   field_grid(u));
        });
        return torch::scalar_tensor(value, u.options());
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        const auto u = ctx->get_saved_variables()[0];
        const double scale = grad_outputs[0].item<double>();
        auto grad = torch::empty_like(u);
        AT_DISPATCH_FLOATING_TYPES(u.scalar_type(), "magnitude_backward", [&] {
            kernels::parallel::magnitude_backward<scalar_t>(u.data_ptr<scalar_t>(), scale,
                                                            grad.data_ptr<scalar_t>(), u.size(0),
                                                            field_grid(u));
        });
        return {grad};
    }
};

struct GradientPenaltyFunction : torch::autograd::Function<GradientPenaltyFunction> {
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& disp) {
        auto u = disp.contiguous();
        ctx->save_for_backward({u});
        double value = 0;
        AT_DISPATCH_FLOATING_TYPES(u.scalar_type(), "gradient_penalty_forward", [&] {
            value = kernels::parallel::gradient_penalty_forward<scalar_t>(u.data_ptr<scalar_t>(),
                                                                          u.size(0), field_grid(u));
        });
        return torch::scalar_tensor(value, u.options());
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        const auto u = ctx->get_saved_variables()[0];
        const double scale = grad_outputs[0].item<double>();
        auto grad = torch::empty_like(u);
        AT_DISPATCH_FLOATING_TYPES(u.scalar_type(), "gradient_penalty_backward", [&] {
            kernels::parallel::gradient_penalty_backward<scalar_t>(
                u.data_ptr<scalar_t>(), scale, grad.data_ptr<scalar_t>(), u.size(0), field_grid(u));
        });
        return {grad};
    }
};

// Per-voxel argmax over region channels; ties resolve to the lowest index.
template <class T>
void label_argmax(const T* src, uint8_t* dst, int64_t batch, int64_t regions, int64_t nvox) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t v = 0; v < nvox; ++v) {
            int64_t best = 0;
            T best_w = src[(b * regions) * nvox + v];
            for (int64_t r = 1; r < regions; ++r) {
                const T w = src[(b * regions + r) * nvox + v];
                if (w > best_w) {
                    best_w = w;
                    best = r;
                }
            }
            dst[b * nvox + v] = static_cast<uint8_t>(best);
        }
    }
}

}  // namespace

std::vector<int64_t> spatial_shape(const torch::Tensor& batched) {
    if (batched.dim() < 3) throw ShapeError("expected a batched tensor [N, C, *S], got " + shape_str(batched));
    return {batched.sizes().begin() + 2, batched.sizes().end()};
}

kernels::GridShape grid_shape(const std::vector<int64_t>& spatial) {
    if (spatial.empty() || spatial.size() > 3) throw ShapeError("spatial rank must be 1..3");
    kernels::GridShape g;
    g.dims = static_cast<int>(spatial.size());
    for (size_t d = 0; d < spatial.size(); ++d) {
        if (spatial[d] < 1) throw ShapeError("spatial dims must be >= 1");
        g.size[d] = spatial[d];
    }
    return g;
}

torch::Tensor identity_grid(const std::vector<int64_t>& spatial, torch::ScalarType dtype) {
    if (spatial.empty()) throw ShapeError("identity_grid: empty shape");
    std::vector<torch::Tensor> axes;
    for (int64_t n : spatial) {
        if (n < 1) throw ShapeError("identity_grid: zero-sized dimension");
        axes.push_back(torch::arange(n, torch::TensorOptions().dtype(dtype)));
    }
    return torch::stack(torch::meshgrid(axes, "ij"));
}

torch::Tensor apply_deformation(const torch::Tensor& image, const torch::Tensor& displacement) {
    check_field(displacement, "apply_deformation");
    if (image.dim() != displacement.dim() || image.size(0) != displacement.size(0)) {
        throw ShapeError("apply_deformation: image " + shape_str(image) + " incompatible with field " +
                         shape_str(displacement));
    }
    if (spatial_shape(image) != spatial_shape(displacement)) {
        throw ShapeError("apply_deformation: spatial shape mismatch " + shape_str(image) + " vs " +
                         shape_str(displacement));
    }
    if (image.scalar_type() != displacement.scalar_type()) {
        throw ShapeError("apply_deformation: dtype mismatch between image and field");
    }
    return WarpFunction::apply(image, displacement);
}

torch::Tensor displacement_magnitude(const torch::Tensor& displacement) {
    check_field(displacement, "displacement_magnitude");
    return MagnitudeFunction::apply(displacement);
}

torch::Tensor displacement_gradient_penalty(const torch::Tensor& displacement) {
    check_field(displacement, "displacement_gradient_penalty");
    for (int64_t n : spatial_shape(displacement)) {
        if (n < 2) throw ShapeError("displacement_gradient_penalty: every spatial dim must be >= 2");
    }
    return GradientPenaltyFunction::apply(displacement);
}

torch::Tensor jacobian_determinant_map(const torch::Tensor& displacement) {
    check_field(displacement, "jacobian_determinant_map");
    auto u = displacement.detach().contiguous();
    const auto sp = spatial_shape(u);
    for (int64_t n : sp) {
        if (n < 2) throw ShapeError("jacobian_determinant_map: every spatial dim must be >= 2");
    }
    std::vector<int64_t> out_shape{u.size(0)};
    out_shape.insert(out_shape.end(), sp.begin(), sp.end());
    auto out = torch::empty(out_shape, u.options());
    AT_DISPATCH_FLOATING_TYPES(u.scalar_type(), "jacobian_determinant", [&] {
        kernels::parallel::jacobian_determinant<scalar_t>(u.data_ptr<scalar_t>(), out.data_ptr<scalar_t>(),
                                                          u.size(0), grid_shape(sp));
    });
    return out;
}

double folding_fraction(const torch::Tensor& displacement) {
    const auto det = jacobian_determinant_map(displacement);
    return (det <= 0).to(torch::kDouble).mean().item<double>();
}

torch::Tensor warp_label_batch(const torch::Tensor& labels, const torch::Tensor& displacement,
                               int64_t num_regions) {
    check_field(displacement, "warp_labels");
    if (labels.dim() != displacement.dim() - 1 || labels.size(0) != displacement.size(0)) {
        throw ShapeError("warp_labels: labels " + shape_str(labels) + " incompatible with field " +
                         shape_str(displacement));
    }
    const std::vector<int64_t> lsp(labels.sizes().begin() + 1, labels.sizes().end());
    if (lsp != spatial_shape(displacement)) throw ShapeError("warp_labels: spatial shape mismatch");
    if (num_regions < 1 || num_regions > 255) throw ShapeError("warp_labels: region count out of range");

    torch::NoGradGuard guard;
    auto lab = labels.to(torch::kLong);
    if (lab.min().item<int64_t>() < 0 || lab.max().item<int64_t>() >= num_regions) {
        throw std::out_of_range("warp_labels: label value outside region table");
    }
    // [N, *S, R] -> [N, R, *S]
    auto onehot = torch::one_hot(lab, num_regions).to(displacement.scalar_type());
    std::vector<int64_t> perm{0, onehot.dim() - 1};
    for (int64_t d = 1; d < onehot.dim() - 1; ++d) perm.push_back(d);
    onehot = onehot.permute(perm).contiguous();
    auto warped = apply_deformation(onehot, displacement.detach()).contiguous();

    const int64_t n = warped.size(0);
    const int64_t nvox = grid_shape(lsp).voxels();
    std::vector<int64_t> out_shape{n};
    out_shape.insert(out_shape.end(), lsp.begin(), lsp.end());
    auto out = torch::empty(out_shape, torch::kUInt8);
    auto* dst = out.data_ptr<uint8_t>();
    AT_DISPATCH_FLOATING_TYPES(warped.scalar_type(), "label_argmax", [&] {
        label_argmax(warped.data_ptr<scalar_t>(), dst, n, num_regions, nvox);
    });
    return out;
}

LabelMap warp_labels(const LabelMap& labels, const torch::Tensor& displacement) {
    auto batched_field = displacement.dim() == labels.labels.dim() + 1 ? displacement.unsqueeze(0) : displacement;
    auto out = warp_label_batch(labels.labels.unsqueeze(0), batched_field, labels.num_regions());
    return LabelMap{out.squeeze(0), labels.region_names};
}

}  // namespace morphldm
