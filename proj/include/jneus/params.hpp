#pragma once

#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "jneus/core.hpp"

namespace jneus {

// One named trainable tensor. Values live in the working precision T;
// gradients and Adam moments accumulate in double and are rounded back to
// float32 after each step so checkpoints round-trip bit-exactly.
template <class T>
struct ParamTensor {
  std::string name;
  Mat<T> value;
  Mat<double> grad;
  Mat<double> m;
  Mat<double> v;

  void reset_moments() {
    grad = Mat<double>::Zero(value.rows(), value.cols());
    m = Mat<double>::Zero(value.rows(), value.cols());
    v = Mat<double>::Zero(value.rows(), value.cols());
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
};

// Cosine decay from lr_start at step 0 to lr_end at step total-1.
inline double cosine_lr(double lr_start, double lr_end, int64_t step, int64_t total) {
  if (total <= 1) return lr_end;
  double t = double(std::min(step, total - 1)) / double(total - 1);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(M_PI * t));
}

inline float round_f32(double x) { return float(x); }

template <class T>
class ParameterStore {
 public:
  ParamTensor<T>& create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    tensors_.push_back(std::make_unique<ParamTensor<T>>());
    auto& p = *tensors_.back();
    p.name = name;
    p.value = Mat<T>::Zero(rows, cols);
    p.reset_moments();
    return p;
  }

  std::vector<std::unique_ptr<ParamTensor<T>>>& tensors() { return tensors_; }
  const std::vector<std::unique_ptr<ParamTensor<T>>>& tensors() const { return tensors_; }

  ParamTensor<T>* find(const std::string& name) {
    for (auto& p : tensors_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : tensors_) p->grad.setZero();
  }

  int64_t step() const { return step_; }

  void adam_step(double lr, const AdamConfig& cfg = {}) {
    ++step_;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(step_));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(step_));
    for (auto& pp : tensors_) {
      auto& p = *pp;
      p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * p.grad;
      p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        // Moments are kept at float32 resolution so optimizer state survives
        // a checkpoint round trip unchanged.
        p.m(i) = double(round_f32(p.m(i)));
        p.v(i) = double(round_f32(p.v(i)));
        double mh = p.m(i) / bc1;
        double vh = p.v(i) / bc2;
        double upd = double(p.value(i)) - lr * mh / (std::sqrt(vh) + cfg.eps);
        p.value(i) = T(round_f32(upd));
      }
    }
  }

  size_t total_values() const {
    size_t n = 0;
    for (auto& p : tensors_) n += size_t(p->value.size());
    return n;
  }

  uint64_t value_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& p : tensors_) {
      h = fnv1a(p->name, h);
      for (Eigen::Index i = 0; i < p->value.size(); ++i) {
        float f = float(p->value(i));
        h = fnv1a(&f, sizeof(f), h);
      }
    }
    return h;
  }

  // Flat binary section: descriptor (tensor count, then name/rows/cols per
  // tensor) followed by little-endian float32 value, m, v blocks, then the
  // step counter.
  void save(std::ostream& os) const {
    write_u32(os, uint32_t(tensors_.size()));
    for (auto& p : tensors_) {
      write_str(os, p->name);
      write_u32(os, uint32_t(p->value.rows()));
      write_u32(os, uint32_t(p->value.cols()));
    }
    for (auto& p : tensors_) {
      write_f32_block(os, p->value);
      write_f32_block(os, p->m);
      write_f32_block(os, p->v);
    }
    uint64_t st = uint64_t(step_);
    os.write(reinterpret_cast<const char*>(&st), sizeof(st));
  }

  void load(std::istream& is) {
    uint32_t count = read_u32(is);
    if (count != tensors_.size()) throw IoError("parameter section: tensor count mismatch");
    for (auto& p : tensors_) {
      std::string name = read_str(is);
      uint32_t rows = read_u32(is), cols = read_u32(is);
      if (name != p->name || rows != uint32_t(p->value.rows()) ||
          cols != uint32_t(p->value.cols()))
        throw IoError("parameter section: descriptor mismatch for " + p->name);
    }
    for (auto& p : tensors_) {
      read_f32_block(is, p->value);
      read_f32_block(is, p->m);
      read_f32_block(is, p->v);
      p->grad.setZero();
    }
    uint64_t st = 0;
    is.read(reinterpret_cast<char*>(&st), sizeof(st));
    if (!is) throw IoError("parameter section: truncated");
    step_ = int64_t(st);
  }

 private:
  static void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError("parameter section: truncated");
    return v;
  }
  static void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
  }
  static std::string read_str(std::istream& is) {
    uint32_t n = read_u32(is);
    if (n > 4096) throw IoError("parameter section: bad string length");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw IoError("parameter section: truncated");
    return s;
  }
  template <class M>
  static void write_f32_block(std::ostream& os, const M& m) {
    std::vector<float> buf(size_t(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) buf[size_t(i)] = float(m(i));
    os.write(reinterpret_cast<const char*>(buf.data()),
             std::streamsize(buf.size() * sizeof(float)));
  }
  template <class M>
  static void read_f32_block(std::istream& is, M& m) {
    std::vector<float> buf(size_t(m.size()));
    is.read(reinterpret_cast<char*>(buf.data()),
            std::streamsize(buf.size() * sizeof(float)));
    if (!is) throw IoError("parameter section: truncated");
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m(i) = typename M::Scalar(buf[size_t(i)]);
  }

  std::vector<std::unique_ptr<ParamTensor<T>>> tensors_;
  int64_t step_ = 0;
};

}  // namespace jneus
