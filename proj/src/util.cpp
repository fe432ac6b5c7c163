#include "lfuse/util.hpp"

#include <fstream>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <openssl/evp.h>

#include "lfuse/errors.hpp"

namespace lfuse {

namespace {

std::string to_hex(const unsigned char* data, unsigned int len) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(digits[data[i] >> 4]);
        out.push_back(digits[data[i] & 0xF]);
    }
    return out;
}

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t len) { EVP_DigestUpdate(ctx_, data, len); }
    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md, &len);
        return to_hex(md, len);
    }
    std::uint64_t first_u64() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md, &len);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v = (v << 8) | md[i];
        return v;
    }

private:
    EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string tensor_digest(const std::vector<torch::Tensor>& tensors) {
    Sha256 h;
    for (const auto& t : tensors) {
        auto c = t.detach().contiguous().cpu();
        h.update(c.data_ptr(), c.numel() * c.element_size());
    }
    return h.hex();
}

double stable_unit_hash(std::string_view key) {
    Sha256 h;
    h.update(key.data(), key.size());
    return static_cast<double>(h.first_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
    // splitmix64 finaliser over the combined value
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

torch::Generator make_generator(std::uint64_t seed) {
    return at::make_generator<at::CPUGeneratorImpl>(seed);
}

torch::Tensor read_image(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw Error("unreadable image: " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return t.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous();
}

torch::Tensor read_mask(const std::filesystem::path& path) {
    cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (gray.empty()) throw Error("unreadable mask: " + path.string());
    auto t = torch::from_blob(gray.data, {gray.rows, gray.cols}, torch::kUInt8).clone();
    return (t > 127).to(torch::kFloat32);
}

void write_image(const std::filesystem::path& path, const torch::Tensor& image) {
    auto hwc = image.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8)
                   .permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), bgr)) throw Error("cannot write image: " + path.string());
}

void write_mask(const std::filesystem::path& path, const torch::Tensor& mask) {
    auto m = (mask.detach() > 0.5).to(torch::kUInt8).mul(255).contiguous();
    cv::Mat gray(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr());
    std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), gray)) throw Error("cannot write mask: " + path.string());
}

torch::Tensor resize_image(const torch::Tensor& image, int64_t height, int64_t width) {
    if (image.size(1) == height && image.size(2) == width) return image;
    namespace F = torch::nn::functional;
    return F::interpolate(image.unsqueeze(0),
                          F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{height, width})
                              .mode(torch::kBilinear)
                              .align_corners(false))
        .squeeze(0)
        .clamp(0.0, 1.0);
}

torch::Tensor resize_mask(const torch::Tensor& mask, int64_t height, int64_t width) {
    if (mask.size(0) == height && mask.size(1) == width) return mask;
    namespace F = torch::nn::functional;
    return F::interpolate(mask.unsqueeze(0).unsqueeze(0),
                          F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{height, width})
                              .mode(torch::kNearest))
        .squeeze(0)
        .squeeze(0);
}

void atomic_write_text(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open for writing: " + tmp.string());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw Error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace lfuse
