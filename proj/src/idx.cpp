#include "nslnet/idx.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace nsl {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError(std::string(what) + ": truncated header");
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

LabeledImages read_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError("read_idx: cannot open '" + images_path.string() + "'");
    if (read_be32(imgs, "idx images") != kImagesMagic) {
        throw FormatError("read_idx: bad images magic in '" + images_path.string() + "'");
    }
    const i64 n = read_be32(imgs, "idx images");
    const i64 h = read_be32(imgs, "idx images");
    const i64 w = read_be32(imgs, "idx images");

    LabeledImages out;
    out.images = Tensor4f(Shape4{n, 1, h, w});
    std::vector<unsigned char> row(static_cast<std::size_t>(h * w));
    for (i64 i = 0; i < n; ++i) {
        if (!imgs.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()))) {
            throw FormatError("read_idx: truncated image payload in '" + images_path.string() + "'");
        }
        float* dst = out.images.data() + i * h * w;
        for (std::size_t p = 0; p < row.size(); ++p) dst[p] = static_cast<float>(row[p]) / 256.0f;
    }

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw IoError("read_idx: cannot open '" + labels_path.string() + "'");
    if (read_be32(labs, "idx labels") != kLabelsMagic) {
        throw FormatError("read_idx: bad labels magic in '" + labels_path.string() + "'");
    }
    const i64 ln = read_be32(labs, "idx labels");
    if (ln != n) throw FormatError("read_idx: image/label count mismatch");
    out.labels.resize(static_cast<std::size_t>(n));
    std::vector<unsigned char> lab(static_cast<std::size_t>(n));
    if (!labs.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size()))) {
        throw FormatError("read_idx: truncated label payload in '" + labels_path.string() + "'");
    }
    for (i64 i = 0; i < n; ++i) {
        if (lab[static_cast<std::size_t>(i)] > 9) throw FormatError("read_idx: label outside [0, 10)");
        out.labels[static_cast<std::size_t>(i)] = lab[static_cast<std::size_t>(i)];
    }
    return out;
}

void write_idx(const LabeledImages& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
    const Shape4& s = data.images.shape();
    if (s.channels != 1) throw ShapeError("write_idx: expected single-channel images");
    if (static_cast<i64>(data.labels.size()) != s.batch) throw DataError("write_idx: image/label count mismatch");

    std::ofstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError("write_idx: cannot open '" + images_path.string() + "'");
    write_be32(imgs, kImagesMagic);
    write_be32(imgs, static_cast<std::uint32_t>(s.batch));
    write_be32(imgs, static_cast<std::uint32_t>(s.height));
    write_be32(imgs, static_cast<std::uint32_t>(s.width));
    std::vector<unsigned char> row(static_cast<std::size_t>(s.pixels()));
    for (i64 i = 0; i < s.batch; ++i) {
        const float* src = data.images.data() + i * s.pixels();
        for (std::size_t p = 0; p < row.size(); ++p) {
            const float v = std::floor(src[p] * 256.0f);
            row[p] = static_cast<unsigned char>(std::clamp(v, 0.0f, 255.0f));
        }
        imgs.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!imgs) throw IoError("write_idx: write failed '" + images_path.string() + "'");

    std::ofstream labs(labels_path, std::ios::binary);
    if (!labs) throw IoError("write_idx: cannot open '" + labels_path.string() + "'");
    write_be32(labs, kLabelsMagic);
    write_be32(labs, static_cast<std::uint32_t>(s.batch));
    for (int l : data.labels) labs.put(static_cast<char>(l));
    if (!labs) throw IoError("write_idx: write failed '" + labels_path.string() + "'");
}

LabeledImages subset(const LabeledImages& data, i64 n) {
    const Shape4& s = data.images.shape();
    if (n < 1 || n > s.batch) throw IndexError("subset: n out of range");
    LabeledImages out;
    out.images = Tensor4f(Shape4{n, s.channels, s.height, s.width});
    std::copy_n(data.images.data(), n * s.channels * s.pixels(), out.images.data());
    out.labels.assign(data.labels.begin(), data.labels.begin() + n);
    return out;
}

namespace {

int next_pnm_int(std::istream& is) {
    // Skips whitespace and '#' comments.
    int c = is.peek();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else {
            is.get();
        }
        c = is.peek();
    }
    int v = 0;
    if (!(is >> v)) throw FormatError("pnm: missing header field");
    return v;
}

}  // namespace

Tensor4f read_pnm_gray(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_pnm: cannot open '" + path.string() + "'");
    char p = 0, kind = 0;
    is.get(p);
    is.get(kind);
    if (p != 'P' || (kind != '5' && kind != '6')) {
        throw FormatError("read_pnm: only binary P5/P6 supported: '" + path.string() + "'");
    }
    const int w = next_pnm_int(is);
    const int h = next_pnm_int(is);
    const int maxval = next_pnm_int(is);
    if (w < 1 || h < 1 || maxval != 255) throw FormatError("read_pnm: unsupported header");
    is.get();  // single whitespace before payload

    const int ch = kind == '6' ? 3 : 1;
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * ch);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
        throw FormatError("read_pnm: truncated payload");
    }
    Tensor4f out(Shape4{1, 1, h, w});
    for (i64 i = 0; i < static_cast<i64>(w) * h; ++i) {
        int acc = 0;
        for (int c = 0; c < ch; ++c) acc += buf[static_cast<std::size_t>(i * ch + c)];
        out[i] = static_cast<float>(acc) / (255.0f * static_cast<float>(ch));
    }
    return out;
}

void write_pgm(const Tensor4f& image, const std::filesystem::path& path) {
    const Shape4& s = image.shape();
    if (s.batch != 1 || s.channels != 1) throw ShapeError("write_pgm: expected (1,1,H,W)");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_pgm: cannot open '" + path.string() + "'");
    os << "P5\n" << s.width << " " << s.height << "\n255\n";
    for (i64 i = 0; i < s.pixels(); ++i) {
        const float v = std::round(std::clamp(image[i], 0.0f, 1.0f) * 255.0f);
        os.put(static_cast<char>(static_cast<unsigned char>(v)));
    }
    if (!os) throw IoError("write_pgm: write failed");
}

}  // namespace nsl
