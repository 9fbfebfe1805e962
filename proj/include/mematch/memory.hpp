#pragma once

#include <vector>

#include "mematch/ops.hpp"

namespace mematch {

// Which write-controller branch handled a key (see Memory::write).
enum class WriteBranch { allocated, merged_same_label, merged_capacity };

inline const char* write_branch_name(WriteBranch b) {
  switch (b) {
    case WriteBranch::allocated: return "allocated";
    case WriteBranch::merged_same_label: return "merged_same_label";
    case WriteBranch::merged_capacity: return "merged_capacity";
  }
  return "?";
}

template <class S>
struct MemorySlot {
  Tensor<S> key;  // unit norm
  int value = 0;  // episode-local label
};

// Episode-local key-value memory. Keys are unit-normalized on insertion and
// after every merge; slots keep allocation order. Selection of the nearest
// slot is treated as a constant for gradients — only the linear store/merge
// expressions are on the tape.
template <class S>
class Memory {
 public:
  Memory(int capacity, int key_dim) : capacity_(capacity), key_dim_(key_dim) {
    if (capacity < 1 || key_dim < 1) {
      throw ValueError(concat("Memory: capacity ", capacity, " and key_dim ", key_dim,
                              " must be >= 1"));
    }
    slots_.reserve(capacity);
  }

  int size() const { return static_cast<int>(slots_.size()); }
  int capacity() const { return capacity_; }
  int key_dim() const { return key_dim_; }
  bool empty() const { return slots_.empty(); }
  const MemorySlot<S>& slot(int i) const { return slots_.at(i); }

  // Write one projected key. Branch order: empty memory allocates; a nearest
  // slot with the same label absorbs the key (normalized mean direction); a
  // free slot allocates; a full memory falls back to merging into the nearest
  // slot, keeping that slot's label.
  WriteBranch write(Tape<S>* tape, const Tensor<S>& zk, int value) {
    if (zk.ndim() != 1 || zk.dim(0) != key_dim_) {
      throw ShapeError(concat("Memory::write: key ", shape_str(zk.shape()), " vs key_dim ",
                              key_dim_));
    }
    Tensor<S> unit = ops::l2_normalize(tape, zk);  // rejects zero-norm input
    if (slots_.empty()) {
      slots_.push_back({unit, value});
      return WriteBranch::allocated;
    }
    const int nearest = nearest_slot(unit);
    if (slots_[nearest].value == value) {
      merge_into(tape, nearest, unit);
      return WriteBranch::merged_same_label;
    }
    if (size() < capacity_) {
      slots_.push_back({unit, value});
      return WriteBranch::allocated;
    }
    merge_into(tape, nearest, unit);  // value of the slot is kept
    return WriteBranch::merged_capacity;
  }

 private:
  // Largest dot product wins; ties resolve to the lowest slot index.
  int nearest_slot(const Tensor<S>& unit) const {
    int best = 0;
    S best_score = kernels::dot(unit.data(), slots_[0].key.data(), key_dim_);
    for (int i = 1; i < size(); ++i) {
      const S score = kernels::dot(unit.data(), slots_[i].key.data(), key_dim_);
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    return best;
  }

  void merge_into(Tape<S>* tape, int i, const Tensor<S>& unit) {
    slots_[i].key = ops::l2_normalize(tape, ops::add(tape, slots_[i].key, unit));
  }

  int capacity_;
  int key_dim_;
  std::vector<MemorySlot<S>> slots_;
};

// Key projection: zk = t_z * z.
template <class S>
Tensor<S> project_key(Tape<S>* tape, const Tensor<S>& z, const Tensor<S>& t_z) {
  return ops::linear(tape, t_z, z);
}

// Softmax weights of the query key against every stored key.
template <class S>
Tensor<S> read_attention(Tape<S>* tape, const Memory<S>& mem, const Tensor<S>& zk) {
  if (mem.empty()) throw ValueError("read: memory is empty");
  const int n = mem.size();
  std::vector<Tensor<S>> scores;
  scores.reserve(n);
  for (int i = 0; i < n; ++i) scores.push_back(ops::dot(tape, zk, mem.slot(i).key));
  Tensor<S> svec = ops::reshape(tape, ops::stack(tape, scores), {n});
  return ops::softmax_vec(tape, svec);
}

// Softmax attention over the stored keys; returns the weighted sum of keys.
template <class S>
Tensor<S> read(Tape<S>* tape, const Memory<S>& mem, const Tensor<S>& zk) {
  Tensor<S> attn = read_attention(tape, mem, zk);
  const int n = mem.size();
  std::vector<Tensor<S>> keys;
  keys.reserve(n);
  for (int i = 0; i < n; ++i) keys.push_back(mem.slot(i).key);
  Tensor<S> key_rows = ops::stack(tape, keys);  // [n, D_m]
  return ops::matvec_t(tape, key_rows, attn);
}

// Context-refined support embedding with shortcut: g = t_c * read(...) + z.
template <class S>
Tensor<S> contextual_embed_support(Tape<S>* tape, const Tensor<S>& z, const Memory<S>& mem,
                                   const Tensor<S>& t_z, const Tensor<S>& t_c) {
  Tensor<S> c = read(tape, mem, project_key(tape, z, t_z));
  return ops::add(tape, ops::linear(tape, t_c, c), z);
}

// Fold the write controller over projected support embeddings. `z_rows` holds
// one embedding per support sample; `order` is the (seeded-shuffled) write
// sequence over row indices.
template <class S>
Memory<S> encode_support(Tape<S>* tape, const Tensor<S>& z_rows, const std::vector<int>& labels,
                         const Tensor<S>& t_z, int capacity, const std::vector<int>& order) {
  if (z_rows.ndim() != 2 || z_rows.dim(0) < 1) {
    throw ShapeError(concat("encode_support: embeddings must be [N,D_z], got ",
                            shape_str(z_rows.shape())));
  }
  const int n = z_rows.dim(0);
  if (static_cast<int>(labels.size()) != n || static_cast<int>(order.size()) != n) {
    throw ShapeError(concat("encode_support: ", n, " rows vs ", labels.size(), " labels, ",
                            order.size(), " order entries"));
  }
  Memory<S> mem(capacity, t_z.dim(0));
  for (int idx : order) {
    Tensor<S> z = ops::index0(tape, z_rows, idx);
    mem.write(tape, project_key(tape, z, t_z), labels[idx]);
  }
  return mem;
}

}  // namespace mematch
