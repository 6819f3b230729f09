// SPDX-License-Identifier: Apache-2.0

#include "p4q/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>

#include <fmt/format.h>

#include "p4q/error.hpp"

namespace p4q::io {

namespace {

constexpr char kCheckpointMagic[4] = {'N', 'F', 'Q', '1'};
constexpr char kAdapterMagic[4] = {'N', 'F', 'A', '1'};

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <class T>
    void le(T v) {
        using U = std::make_unsigned_t<T>;
        auto u = static_cast<U>(v);
        for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
    void name(const std::string& s) {
        if (s.size() > std::numeric_limits<std::uint16_t>::max()) {
            fail(ErrorKind::parameter, "tensor name longer than 65535 bytes");
        }
        le(static_cast<std::uint16_t>(s.size()));
        bytes(s.data(), s.size());
    }

    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    std::uint64_t offset() const noexcept { return pos_; }
    std::uint64_t remaining() const noexcept { return in_.size() - pos_; }

    void need(std::uint64_t n, const char* what) const {
        if (n > remaining()) {
            throw FormatError(fmt::format("truncated file: {} needs {} bytes, {} left", what, n, remaining()), pos_);
        }
    }
    std::span<const std::uint8_t> bytes(std::uint64_t n, const char* what) {
        need(n, what);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    template <class T>
    T le(const char* what) {
        auto s = bytes(sizeof(T), what);
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(s[i]) << (8 * i);
        return static_cast<T>(u);
    }
    float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
    std::string name() {
        const auto len = le<std::uint16_t>("name length");
        auto s = bytes(len, "name");
        return std::string(s.begin(), s.end());
    }

    [[noreturn]] void bad(const std::string& what) const { throw FormatError(what, pos_); }

private:
    std::span<const std::uint8_t> in_;
    std::uint64_t pos_ = 0;
};

std::uint64_t numel_of(const std::vector<std::uint64_t>& shape) {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

void read_header(Reader& r, const char (&magic)[4], const char* kind) {
    auto m = r.bytes(4, "magic");
    if (std::memcmp(m.data(), magic, 4) != 0) {
        throw FormatError(fmt::format("bad magic: not an {} file", kind), 0);
    }
    const auto version = r.le<std::uint32_t>("version");
    if (version != kFormatVersion) {
        throw FormatError(fmt::format("unsupported version {}", version), 4);
    }
}

std::vector<float> read_f32s(Reader& r, std::uint64_t n, const char* what) {
    if (n > r.remaining() / 4) {
        throw FormatError(fmt::format("truncated file: {} needs {} values, {} bytes left", what, n, r.remaining()),
                          r.offset());
    }
    std::vector<float> out(n);
    for (auto& v : out) v = r.f32(what);
    return out;
}

}  // namespace

std::uint64_t TensorRecord::numel() const noexcept {
    return std::visit([](const auto& t) { return numel_of(t.shape); }, payload);
}

std::uint64_t payload_size(const TensorRecord& t) {
    if (const auto* q = std::get_if<nfq::QuantizedTensor>(&t.payload)) {
        return nfq::packed_code_bytes(q->numel(), q->bits) + 4 * nfq::block_count(q->numel(), q->block_size);
    }
    return 4 * t.numel();
}

std::uint64_t checkpoint_size(std::span<const TensorRecord> tensors) {
    std::uint64_t n = 12;
    for (const auto& t : tensors) {
        const std::size_t ndim = std::visit([](const auto& p) { return p.shape.size(); }, t.payload);
        n += 2 + t.name.size() + 1 + 1 + 4 + 1 + 8 * ndim + payload_size(t);
    }
    return n;
}

std::vector<std::uint8_t> encode_checkpoint(std::span<const TensorRecord> tensors) {
    Writer w;
    w.bytes(kCheckpointMagic, 4);
    w.le(kFormatVersion);
    w.le(static_cast<std::uint32_t>(tensors.size()));
    for (const TensorRecord& t : tensors) {
        w.name(t.name);
        const auto& shape = std::visit([](const auto& p) -> const std::vector<std::uint64_t>& { return p.shape; },
                                       t.payload);
        require(!shape.empty() && shape.size() <= 255, ErrorKind::parameter, t.name + ": rank must be in [1, 255]");
        if (const auto* q = std::get_if<nfq::QuantizedTensor>(&t.payload)) {
            require(q->codes.size() == nfq::packed_code_bytes(q->numel(), q->bits) &&
                        q->scales.size() == nfq::block_count(q->numel(), q->block_size),
                    ErrorKind::parameter, t.name + ": inconsistent quantized payload");
            w.le(std::uint8_t{1});
            w.le(static_cast<std::uint8_t>(q->bits));
            w.le(q->block_size);
        } else {
            require(std::get<Fp32Tensor>(t.payload).data.size() == numel_of(shape), ErrorKind::parameter,
                    t.name + ": fp32 data length does not match shape");
            w.le(std::uint8_t{0});
            w.le(std::uint8_t{0});
            w.le(std::uint32_t{0});
        }
        w.le(static_cast<std::uint8_t>(shape.size()));
        for (auto d : shape) w.le(d);
        if (const auto* q = std::get_if<nfq::QuantizedTensor>(&t.payload)) {
            w.bytes(q->codes.data(), q->codes.size());
            for (float s : q->scales) w.f32(s);
        } else {
            for (float v : std::get<Fp32Tensor>(t.payload).data) w.f32(v);
        }
    }
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    read_header(r, kCheckpointMagic, "NFQ1 checkpoint");
    const auto count = r.le<std::uint32_t>("tensor count");
    Checkpoint out;
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord t;
        t.name = r.name();
        const auto kind = r.le<std::uint8_t>("kind");
        const auto bits = r.le<std::uint8_t>("bit width");
        const auto block = r.le<std::uint32_t>("block size");
        const auto ndim = r.le<std::uint8_t>("ndim");
        if (ndim == 0) r.bad(t.name + ": zero-rank tensor");
        std::vector<std::uint64_t> shape(ndim);
        for (auto& d : shape) d = r.le<std::uint64_t>("dims");
        std::uint64_t numel = 1;
        for (auto d : shape) {
            // At least 2 bits per element, so 4 elements per remaining byte bounds any valid tensor.
            if (d == 0 || numel > (r.remaining() * 4 + 3) / d) r.bad(t.name + ": dims exceed file size");
            numel *= d;
        }
        if (kind == 0) {
            if (bits != 0 || block != 0) r.bad(t.name + ": fp32 record with non-zero bit width or block size");
            t.payload = Fp32Tensor{std::move(shape), read_f32s(r, numel, "fp32 payload")};
        } else if (kind == 1) {
            if (bits < nfq::kMinBits || bits > nfq::kMaxBits) r.bad(fmt::format("{}: bit width {}", t.name, bits));
            if (block == 0) r.bad(t.name + ": zero block size");
            nfq::QuantizedTensor q;
            q.shape = std::move(shape);
            q.bits = bits;
            q.block_size = block;
            auto codes = r.bytes(nfq::packed_code_bytes(numel, bits), "packed codes");
            q.codes.assign(codes.begin(), codes.end());
            q.scales = read_f32s(r, nfq::block_count(numel, block), "scales");
            t.payload = std::move(q);
        } else {
            r.bad(fmt::format("{}: unknown tensor kind {}", t.name, kind));
        }
        out.push_back(std::move(t));
    }
    if (r.remaining() != 0) r.bad("trailing bytes after last tensor");
    return out;
}

std::uint64_t adapters_size(std::span<const NamedAdapter> adapters) {
    std::uint64_t n = 12;
    for (const auto& a : adapters) {
        n += 2 + a.target.size() + 4 + 4 + 8 + 8 + 4 * (a.adapter.a.size() + a.adapter.b.size());
    }
    return n;
}

std::vector<std::uint8_t> encode_adapters(std::span<const NamedAdapter> adapters) {
    Writer w;
    w.bytes(kAdapterMagic, 4);
    w.le(kFormatVersion);
    w.le(static_cast<std::uint32_t>(adapters.size()));
    for (const NamedAdapter& na : adapters) {
        lora::validate(na.adapter);
        w.name(na.target);
        w.le(static_cast<std::uint32_t>(na.adapter.rank()));
        w.f32(static_cast<float>(na.adapter.alpha));
        w.le(static_cast<std::uint64_t>(na.adapter.d_out()));
        w.le(static_cast<std::uint64_t>(na.adapter.d_in()));
        for (double v : na.adapter.a.values()) w.f32(static_cast<float>(v));
        for (double v : na.adapter.b.values()) w.f32(static_cast<float>(v));
    }
    return w.take();
}

std::vector<NamedAdapter> decode_adapters(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    read_header(r, kAdapterMagic, "NFA1 adapter");
    const auto count = r.le<std::uint32_t>("adapter count");
    std::vector<NamedAdapter> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedAdapter na;
        na.target = r.name();
        const auto rank = r.le<std::uint32_t>("rank");
        const float alpha = r.f32("alpha");
        const auto d_out = r.le<std::uint64_t>("d_out");
        const auto d_in = r.le<std::uint64_t>("d_in");
        if (rank == 0 || d_out == 0 || d_in == 0) r.bad(na.target + ": zero adapter dimension");
        if (rank > d_out || rank > d_in) r.bad(na.target + ": rank exceeds adapter dimensions");
        if (!(alpha > 0.0f) || !std::isfinite(alpha)) r.bad(na.target + ": alpha must be positive");
        if (d_in > r.remaining() / rank || d_out > r.remaining() / rank) r.bad(na.target + ": dims exceed file size");
        auto to_matrix_checked = [&](std::uint64_t rows, std::uint64_t cols, const char* what) {
            const std::uint64_t at = r.offset();
            std::vector<float> raw = read_f32s(r, rows * cols, what);
            std::vector<double> vals(raw.begin(), raw.end());
            for (double v : vals)
                if (!std::isfinite(v)) throw FormatError(na.target + ": non-finite adapter entry", at);
            return Matrix(rows, cols, std::move(vals));
        };
        na.adapter.a = to_matrix_checked(rank, d_in, "adapter A");
        na.adapter.b = to_matrix_checked(d_out, rank, "adapter B");
        na.adapter.alpha = alpha;
        out.push_back(std::move(na));
    }
    if (r.remaining() != 0) r.bad("trailing bytes after last adapter");
    return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) fail(ErrorKind::io, "cannot open " + tmp.string() + " for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) fail(ErrorKind::io, "write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) fail(ErrorKind::io, "cannot rename " + tmp.string() + ": " + ec.message());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void store_checkpoint(const std::filesystem::path& path, std::span<const TensorRecord> tensors) {
    write_file_atomic(path, encode_checkpoint(tensors));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

void store_adapters(const std::filesystem::path& path, std::span<const NamedAdapter> adapters) {
    write_file_atomic(path, encode_adapters(adapters));
}

std::vector<NamedAdapter> load_adapters(const std::filesystem::path& path) {
    return decode_adapters(read_file(path));
}

Fp32Tensor to_fp32(const Matrix& m, bool as_vector) {
    Fp32Tensor t;
    if (as_vector) {
        t.shape = {m.size()};
    } else {
        t.shape = {m.rows(), m.cols()};
    }
    t.data.reserve(m.size());
    for (double v : m.values()) t.data.push_back(static_cast<float>(v));
    return t;
}

Matrix to_matrix(const Fp32Tensor& t) {
    require(t.shape.size() == 1 || t.shape.size() == 2, ErrorKind::shape, "only 1-D and 2-D tensors map to matrices");
    const std::size_t rows = t.shape[0];
    const std::size_t cols = t.shape.size() == 2 ? t.shape[1] : 1;
    std::vector<double> vals(t.data.begin(), t.data.end());
    try {
        return Matrix(rows, cols, std::move(vals));
    } catch (const Error& e) {
        // Stored weights that are not finite cannot enter the model.
        fail(ErrorKind::data, e.what());
    }
}

Checkpoint quantize_checkpoint(const Checkpoint& in, int bits, std::size_t block_size, unsigned threads) {
    const nfq::Codebook codebook = nfq::build_nf_codebook(bits);
    Checkpoint out;
    for (const TensorRecord& t : in) {
        const auto* fp = std::get_if<Fp32Tensor>(&t.payload);
        if (!fp || fp->shape.size() < 2) {
            out.push_back(t);
            continue;
        }
        // Higher-rank tensors are flattened to rows x (product of trailing dims).
        std::uint64_t cols = 1;
        for (std::size_t i = 1; i < fp->shape.size(); ++i) cols *= fp->shape[i];
        Matrix m = to_matrix(Fp32Tensor{{fp->shape[0], cols}, fp->data});
        nfq::QuantizedTensor q = nfq::quantize_tensor(m, codebook, block_size, threads);
        q.shape = fp->shape;
        out.push_back({t.name, std::move(q)});
    }
    return out;
}

Checkpoint dequantize_checkpoint(const Checkpoint& in) {
    Checkpoint out;
    for (const TensorRecord& t : in) {
        const auto* q = std::get_if<nfq::QuantizedTensor>(&t.payload);
        if (!q) {
            out.push_back(t);
            continue;
        }
        const nfq::Codebook codebook = nfq::build_nf_codebook(q->bits);
        nfq::QuantizedTensor flat = *q;
        flat.shape = {q->numel()};
        const Matrix m = nfq::dequantize(flat, codebook);
        Fp32Tensor fp;
        fp.shape = q->shape;
        for (double v : m.values()) fp.data.push_back(static_cast<float>(v));
        out.push_back({t.name, std::move(fp)});
    }
    return out;
}

CheckpointStats checkpoint_stats(const Checkpoint& original, const Checkpoint& quantized) {
    CheckpointStats st;
    double sq_sum = 0.0, bit_sum = 0.0;
    std::optional<double> common_bits;  // exact when every tensor shares k and B
    bool mixed = false;
    for (const TensorRecord& t : quantized) {
        const auto* q = std::get_if<nfq::QuantizedTensor>(&t.payload);
        if (!q) continue;
        const auto it = std::find_if(original.begin(), original.end(),
                                     [&](const TensorRecord& o) { return o.name == t.name; });
        require(it != original.end(), ErrorKind::parameter, fmt::format("stats: '{}' missing from original", t.name));
        const auto* fp = std::get_if<Fp32Tensor>(&it->payload);
        require(fp != nullptr, ErrorKind::parameter, fmt::format("stats: original '{}' is not fp32", t.name));
        require(fp->shape == q->shape, ErrorKind::shape, fmt::format("stats: '{}' shapes differ", t.name));

        const std::uint64_t n = q->numel();
        nfq::QuantizedTensor flat = *q;
        flat.shape = {n};
        const Matrix orig(1, n, std::vector<double>(fp->data.begin(), fp->data.end()));
        const nfq::QuantStats s = nfq::quant_stats(orig, flat, nfq::build_nf_codebook(q->bits));
        sq_sum += s.mse * static_cast<double>(n);
        bit_sum += s.bits_per_param * static_cast<double>(n);
        if (common_bits && *common_bits != s.bits_per_param) mixed = true;
        common_bits = s.bits_per_param;
        st.max_abs_err = std::max(st.max_abs_err, s.max_abs_err);
        st.params += n;
        ++st.tensors;
    }
    require(st.tensors > 0, ErrorKind::parameter, "stats: no quantized tensors to compare");
    st.mse = sq_sum / static_cast<double>(st.params);
    st.bits_per_param = mixed ? bit_sum / static_cast<double>(st.params) : *common_bits;
    st.compression_ratio_vs_fp32 = 32.0 / st.bits_per_param;
    return st;
}

Checkpoint model_to_checkpoint(const net::ToyModel& model) {
    Checkpoint out;
    auto weights = model.weights();
    auto biases = model.biases();
    for (std::size_t i = 0; i < model.blocks().size(); ++i) {
        const std::string prefix = fmt::format("{}.", i);
        for (const auto& [name, w] : weights) {
            if (!name.starts_with(prefix)) continue;
            if (w->state == net::BaseState::quantized) {
                out.push_back({name, *w->quantized});
            } else {
                out.push_back({name, to_fp32(w->value)});
            }
        }
        for (const auto& [name, b] : biases) {
            if (name.starts_with(prefix)) out.push_back({name, to_fp32(*b, true)});
        }
    }
    return out;
}

net::ToyModel model_from_checkpoint(const Checkpoint& ckpt) {
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& t : ckpt) {
        if (!by_name.emplace(t.name, &t).second) fail(ErrorKind::format, "duplicate tensor name " + t.name);
    }
    auto find = [&](const std::string& name) -> const TensorRecord& {
        auto it = by_name.find(name);
        if (it == by_name.end()) fail(ErrorKind::format, "checkpoint is missing tensor " + name);
        return *it->second;
    };
    auto weight = [&](const std::string& name) {
        const TensorRecord& t = find(name);
        net::Weight w;
        if (const auto* q = std::get_if<nfq::QuantizedTensor>(&t.payload)) {
            require(q->shape.size() == 2, ErrorKind::format, name + ": weight must be 2-D");
            w.codebook = nfq::build_nf_codebook(q->bits);
            w.quantized = *q;
            w.value = nfq::dequantize(*q, *w.codebook);
            w.state = net::BaseState::quantized;
        } else {
            const auto& fp = std::get<Fp32Tensor>(t.payload);
            require(fp.shape.size() == 2, ErrorKind::format, name + ": weight must be 2-D");
            w.value = to_matrix(fp);
        }
        return w;
    };
    auto bias = [&](const std::string& name) {
        const TensorRecord& t = find(name);
        const auto* fp = std::get_if<Fp32Tensor>(&t.payload);
        require(fp && fp->shape.size() == 1, ErrorKind::format, name + ": bias must be a 1-D fp32 tensor");
        return to_matrix(*fp);
    };
    if (by_name.size() != 8) fail(ErrorKind::format, "checkpoint does not hold the toy model layout");
    try {
        return net::ToyModel({net::Linear{weight("0.weight"), bias("0.bias")}, net::Tanh{},
                              net::SelfAttention{weight("2.wq"), weight("2.wk"), weight("2.wv"), weight("2.wo")},
                              net::Linear{weight("3.weight"), bias("3.bias")}});
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::shape) fail(ErrorKind::format, e.what());
        throw;
    }
}

Checkpoint biases_to_checkpoint(const net::ToyModel& model) {
    Checkpoint out;
    for (const auto& [name, b] : model.biases()) out.push_back({name, to_fp32(*b, true)});
    return out;
}

void assign_biases(net::ToyModel& model, const Checkpoint& ckpt) {
    auto biases = model.biases();
    for (const TensorRecord& t : ckpt) {
        auto it = std::find_if(biases.begin(), biases.end(), [&](const auto& p) { return p.first == t.name; });
        if (it == biases.end()) fail(ErrorKind::parameter, "record " + t.name + " names no bias of the model");
        const auto* fp = std::get_if<Fp32Tensor>(&t.payload);
        require(fp != nullptr, ErrorKind::parameter, "bias record " + t.name + " is not fp32");
        require(fp->data.size() == it->second->size(), ErrorKind::shape, "bias record " + t.name + " has wrong length");
        *it->second = Matrix(it->second->rows(), it->second->cols(), std::vector<double>(fp->data.begin(), fp->data.end()));
    }
}

std::vector<NamedAdapter> collect_adapters(const net::ToyModel& model) {
    std::vector<NamedAdapter> out;
    for (const auto& [name, w] : model.weights())
        if (w->adapter) out.push_back({name, *w->adapter});
    return out;
}

void attach_adapters(net::ToyModel& model, std::span<const NamedAdapter> adapters) {
    auto weights = model.weights();
    for (const NamedAdapter& na : adapters) {
        auto it = std::find_if(weights.begin(), weights.end(), [&](const auto& p) { return p.first == na.target; });
        if (it == weights.end()) fail(ErrorKind::parameter, "adapter targets unknown tensor " + na.target);
        lora::validate(na.adapter);
        if (na.adapter.d_out() != it->second->value.rows() || na.adapter.d_in() != it->second->value.cols()) {
            fail(ErrorKind::shape, "adapter for " + na.target + " does not match the weight shape");
        }
        it->second->adapter = na.adapter;
    }
}

}  // namespace p4q::io
