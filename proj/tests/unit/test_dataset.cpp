#include <doctest.h>

#include <fstream>

#include "ghfeat/dataset.hpp"
#include "ghfeat/errors.hpp"
#include "ghfeat/image_io.hpp"
#include "support.hpp"

using namespace ghfeat;
namespace fs = std::filesystem;

namespace {

// Writes train/t10k IDX pairs with the standard 28x28 layout. Pixel values
// encode (index mod 256) so normalization and order are checkable.
void write_digits(const fs::path& root, int32_t train, int32_t test) {
  fs::create_directories(root);
  for (const auto& [prefix, n] : {std::pair{std::string("train"), train}, std::pair{std::string("t10k"), test}}) {
    IdxArray images{{n, 28, 28}, std::vector<uint8_t>(static_cast<size_t>(n) * 784)};
    IdxArray labels{{n}, std::vector<uint8_t>(static_cast<size_t>(n))};
    for (int32_t i = 0; i < n; ++i) {
      std::fill_n(images.data.begin() + static_cast<ptrdiff_t>(i) * 784, 784, static_cast<uint8_t>(i % 256));
      labels.data[i] = static_cast<uint8_t>(i % 10);
    }
    write_idx(images, root / (prefix + "-images-idx3-ubyte"));
    write_idx(labels, root / (prefix + "-labels-idx1-ubyte"));
  }
}

}  // namespace

TEST_SUITE("dataset") {
  TEST_CASE("standard digit split sizes load at 32x32 in [-1, 1]") {
    test::TempDir dir("digits-full");
    write_digits(dir.path(), 60000, 10000);
    DatasetSpec spec;
    spec.root = dir.path();
    const auto train = load_dataset(spec);
    spec.split = "test";
    const auto test = load_dataset(spec);
    CHECK(train.size() == 60000);
    CHECK(test.size() == 10000);
    CHECK(train.images.sizes() == torch::IntArrayRef({60000, 1, 32, 32}));
    CHECK(train.labels.size() == 60000);
    CHECK(train.images.min().item<float>() >= -1.0f);
    CHECK(train.images.max().item<float>() <= 1.0f);
    // constant images stay constant after resizing: 0 -> -1, 255 -> +1
    CHECK(train.images[0].min().item<float>() == doctest::Approx(-1.0));
    CHECK(train.images[255].max().item<float>() == doctest::Approx(1.0));
    CHECK(train.labels[37] == 7);
  }

  TEST_CASE("index ranges slice deterministically and overlap is detected") {
    test::TempDir dir("digits-small");
    write_digits(dir.path(), 50, 10);
    DatasetSpec a;
    a.root = dir.path();
    a.begin = 10;
    a.end = 20;
    const auto d = load_dataset(a);
    CHECK(d.size() == 10);
    CHECK(d.labels.front() == 0);
    DatasetSpec b = a;
    b.begin = 15;
    b.end = 30;
    CHECK_THROWS_AS(check_disjoint(a, b), DataError);
    b.begin = 20;
    CHECK_NOTHROW(check_disjoint(a, b));
    b.split = "test";
    b.begin = 0;
    CHECK_NOTHROW(check_disjoint(a, b));
  }

  TEST_CASE("shuffle order is a seeded permutation") {
    Dataset d;
    d.images = torch::zeros({100, 1, 32, 32});
    const auto o1 = d.order(4, 0), o2 = d.order(4, 0), o3 = d.order(4, 1);
    CHECK(o1 == o2);
    CHECK(o1 != o3);
    auto sorted = o1;
    std::sort(sorted.begin(), sorted.end());
    for (int64_t i = 0; i < 100; ++i) CHECK(sorted[i] == i);
  }

  TEST_CASE("truncated or mistyped IDX files name the path") {
    test::TempDir dir("digits-bad");
    write_digits(dir.path(), 5, 5);
    const auto path = dir.path() / "train-images-idx3-ubyte";
    fs::resize_file(path, fs::file_size(path) - 100);
    DatasetSpec spec;
    spec.root = dir.path();
    try {
      load_dataset(spec);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(e.path() == path.string());
    }
    {
      std::ofstream out(path, std::ios::binary);
      out.write("\0\0\x0d\x03", 4);
    }
    CHECK_THROWS_AS(read_idx(path), DataError);
    CHECK_THROWS_AS(read_idx(dir.path() / "nope"), DataError);
  }

  TEST_CASE("image folders: labels from subdirectories, errors for empty or corrupt") {
    test::TempDir dir("folder");
    fs::create_directories(dir.path() / "train" / "3");
    fs::create_directories(dir.path() / "train" / "5");
    write_png(torch::ones({1, 32, 32}), dir.path() / "train" / "3" / "a.png");
    write_png(-torch::ones({1, 64, 64}), dir.path() / "train" / "5" / "b.png");
    DatasetSpec spec;
    spec.kind = SourceKind::kImageFolder;
    spec.root = dir.path();
    const auto d = load_dataset(spec);
    CHECK(d.size() == 2);
    CHECK(d.labels == std::vector<int64_t>{3, 5});
    CHECK(d.images.sizes() == torch::IntArrayRef({2, 1, 32, 32}));

    fs::create_directories(dir.path() / "test");
    spec.split = "test";
    CHECK_THROWS_AS(load_dataset(spec), DataError);

    const auto bad = dir.path() / "test" / "broken.png";
    std::ofstream(bad) << "not a png";
    CHECK_THROWS_WITH_AS(load_dataset(spec), doctest::Contains(bad.string().c_str()), DataError);
  }

  TEST_CASE("spec validation") {
    DatasetSpec spec;
    spec.resolution = 48;
    CHECK_THROWS_AS(spec.validate(), ConfigurationError);
    spec.resolution = 32;
    spec.channels = 2;
    CHECK_THROWS_AS(spec.validate(), ConfigurationError);
  }

  TEST_CASE("conform maps channels and resolution") {
    const auto gray = torch::rand({2, 1, 28, 28}) * 2 - 1;
    const auto rgb = conform_images(gray, 32, 3);
    CHECK(rgb.sizes() == torch::IntArrayRef({2, 3, 32, 32}));
    CHECK(torch::equal(rgb.select(1, 0), rgb.select(1, 2)));
  }
}
