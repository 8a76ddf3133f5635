#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "rcm/attention.hpp"
#include "rcm/dual.hpp"
#include "rcm/tensor.hpp"

namespace rcm {

// Flat named-parameter store; gradients mirror values.
struct ParamStore {
    std::vector<std::string> order;
    std::unordered_map<std::string, Tensor> value;
    std::unordered_map<std::string, Tensor> grad;

    Tensor& add(const std::string& name, Tensor init);
    Tensor& p(const std::string& name);
    const Tensor& p(const std::string& name) const;
    Tensor& g(const std::string& name);
    void zero_grad();
    double grad_norm() const;
};

enum class NetVariant { Mlp, TinyTransformer };
enum class TimeEmbedPrecision { SameAsNet, AlwaysDouble };

struct NetConfig {
    NetVariant variant = NetVariant::Mlp;
    int data_dim = 2;   // mlp feature width / transformer token channels
    int seq_len = 8;    // transformer only
    int hidden = 64;
    int n_hidden_layers = 3;  // mlp only
    int d_model = 32;   // transformer only
    int n_blocks = 2;   // transformer only
    int n_heads = 2;    // transformer only
    int time_embed_dim = 16;
    int cond_classes = 0;  // 0 = unconditional; else classes + null token
    bool has_s = false;    // second trajectory-time input (mlp only)
    TimeEmbedPrecision temb_prec = TimeEmbedPrecision::SameAsNet;
    Precision exec_prec = Precision::Double;

    int null_token() const { return cond_classes; }
    void validate() const;
};

// Conditional velocity network F(x_t, t, cond) with a tangent-threaded
// forward pass. forward() and forward_jvp() share one primal path, so zero
// tangents reproduce forward bitwise. backward() consumes the tape left by
// forward(..., /*keep_tape=*/true) and accumulates parameter gradients;
// JVP tangents never enter parameter gradients.
class VelocityNet {
public:
    NetConfig cfg;
    ParamStore params;

    explicit VelocityNet(NetConfig c);
    void init(Rng& rng);

    // x: [B,D] (mlp) or [B,L,C] (transformer); t (and optional s): one
    // scalar per batch element; cond: class index per element, empty for
    // unconditional.
    Tensor forward(const Tensor& x, const std::vector<double>& t, const std::vector<int>& cond,
                   bool keep_tape = false, const std::vector<double>& s = {});
    struct JvpResult {
        Tensor F, tF;
    };
    JvpResult forward_jvp(const Tensor& x, const std::vector<double>& t,
                          const std::vector<int>& cond, const Tensor& tx,
                          const std::vector<double>& tt, const std::vector<double>& s = {});
    void backward(const Tensor& dF);

    VelocityNet clone() const;
    // Runs the same parameters at another precision (for the precision study).
    VelocityNet with_precision(Precision p, TimeEmbedPrecision tp) const;

private:
    struct Tape;
    std::shared_ptr<Tape> tape_;
    JvpResult run(const Tensor& x, const std::vector<double>& t, const std::vector<int>& cond,
                  const Tensor* tx, const std::vector<double>* tt, bool keep_tape,
                  const std::vector<double>& s);
};

// f = cos(t) x - sin(t) F, elementwise per batch entry.
Tensor consistency_apply(const Tensor& F, const Tensor& x_t, const std::vector<double>& t);

struct CfgSpec {
    double scale = 1.0;
    int null_cond = 0;
};

// F_cfg = F(null) + s (F(cond) - F(null)).
Tensor cfg_velocity(VelocityNet& net, const Tensor& x_t, const std::vector<double>& t,
                    const std::vector<int>& cond, const CfgSpec& spec);

void save_checkpoint(const VelocityNet& net, const std::string& path_prefix);
void load_checkpoint(VelocityNet& net, const std::string& path_prefix);

}  // namespace rcm
