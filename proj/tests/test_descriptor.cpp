#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace gravprune;
using namespace gravprune::testing;

namespace {

std::size_t count_kind(const Model& m, LayerKind k) {
  return static_cast<std::size_t>(
      std::count_if(m.layers().begin(), m.layers().end(), [&](const LayerSpec& l) { return l.kind == k; }));
}

}  // namespace

TEST(Descriptor, ToyNetHasTheListedLayers) {
  Model m = load_arch("toy2.arch");
  std::vector<LayerKind> kinds;
  for (const auto& l : m.layers()) kinds.push_back(l.kind);
  EXPECT_EQ(kinds, (std::vector<LayerKind>{LayerKind::conv2d, LayerKind::relu, LayerKind::conv2d, LayerKind::flatten,
                                           LayerKind::linear}));
  EXPECT_EQ(m.layers()[0].out_channels, 8u);
  EXPECT_EQ(m.layers()[2].out_channels, 16u);
  EXPECT_EQ(m.num_classes(), 10u);
  std::size_t with_params = 0;
  for (const auto& ps : m.params) with_params += !ps.empty();
  EXPECT_EQ(with_params, 3u);  // conv, conv, linear
}

TEST(Descriptor, ResNet56Counts) {
  Model m = load_arch("resnet56.arch");
  EXPECT_EQ(count_kind(m, LayerKind::conv2d), 55u);
  EXPECT_EQ(count_kind(m, LayerKind::linear), 1u);
  EXPECT_EQ(count_kind(m, LayerKind::add), 27u);
  const double params = static_cast<double>(cost_model(m).total_params);
  EXPECT_NEAR(params / 0.85e6, 1.0, 0.005) << params;
}

TEST(Descriptor, Vgg19Counts) {
  Model m = load_arch("vgg19.arch");
  EXPECT_EQ(count_kind(m, LayerKind::conv2d), 16u);
  EXPECT_EQ(count_kind(m, LayerKind::linear), 1u);
  const double params = static_cast<double>(cost_model(m).total_params);
  EXPECT_NEAR(params / 20.07e6, 1.0, 0.001) << params;
}

TEST(Descriptor, FormatParsesBackToSameArchitecture) {
  for (auto name : {"toy2.arch", "toy4.arch", "resnet56.arch", "vgg19.arch"}) {
    Model m = load_arch(name);
    ArchDescriptor again = parse_descriptor(format_descriptor(m.arch));
    infer_shapes(again);
    EXPECT_EQ(again, m.arch) << name;
  }
}

TEST(Descriptor, ParseErrors) {
  const std::string head = "gravprune-arch 1\ninput 3 8 8\n";
  EXPECT_THROW(parse_descriptor(""), ParseError);
  EXPECT_THROW(parse_descriptor("input 3 8 8\nrelu\n"), ParseError);
  EXPECT_THROW(parse_descriptor("gravprune-arch 2\ninput 3 8 8\nrelu\n"), ParseError);
  EXPECT_THROW(parse_descriptor(head + "softmax s\n"), ParseError);
  EXPECT_THROW(parse_descriptor(head + "conv2d c k=3\n"), ParseError);
  EXPECT_THROW(parse_descriptor(head + "conv2d c out=4 k=3 colour=red\n"), ParseError);
  EXPECT_THROW(parse_descriptor(head + "conv2d c out=four k=3\n"), ParseError);
  EXPECT_THROW(parse_descriptor(head + "relu r\nrelu r\n"), ParseError);
  EXPECT_THROW(parse_descriptor(head + "relu r in=nowhere\n"), ParseError);
  EXPECT_THROW(parse_descriptor(head + "relu a\nadd j in=a\n"), ParseError);
  EXPECT_THROW(parse_descriptor("gravprune-arch 1\nrelu r\n"), ParseError);
}

TEST(Descriptor, ShapeMismatchNamesTheLayer) {
  const std::string head = "gravprune-arch 1\ninput 3 8 8\n";
  try {
    build_model(head + "conv2d a out=4 k=3 pad=1\nconv2d bad out=4 k=3 cin=5\nflatten f\nlinear fc out=2\n", 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("'bad'"), std::string::npos) << e.what();
  }
  try {
    build_model(head + "conv2d a out=4 k=3 pad=1\nconv2d b in=input out=6 k=3 pad=1\nadd join in=a,b\n"
                       "flatten f\nlinear fc out=2\n",
                1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("'join'"), std::string::npos) << e.what();
  }
  // Dangling branch: two outputs.
  EXPECT_THROW(build_model(head + "conv2d a out=4 k=3\nconv2d b in=input out=4 k=3\nflatten f\nlinear fc out=2\n", 1),
               ShapeError);
  // Logits must be flat.
  EXPECT_THROW(build_model(head + "conv2d a out=4 k=3\n", 1), ShapeError);
  // Kernel larger than the padded input.
  EXPECT_THROW(build_model(head + "conv2d a out=4 k=11\nflatten f\nlinear fc out=2\n", 1), ShapeError);
}

TEST(Descriptor, ConvShapeLaw) {
  for (std::size_t in : {5u, 8u, 9u, 16u})
    for (std::size_t k : {1u, 3u, 5u})
      for (std::size_t stride : {1u, 2u, 3u})
        for (std::size_t pad : {0u, 1u, 2u}) {
          if (in + 2 * pad < k) continue;
          std::ostringstream os;
          os << "gravprune-arch 1\ninput 2 " << in << ' ' << in << "\nconv2d c out=3 k=" << k << " stride=" << stride
             << " pad=" << pad << "\nflatten f\nlinear fc out=2\n";
          Model m = build_model(os.str(), 1);
          const std::size_t expected = (in + 2 * pad - k) / stride + 1;
          EXPECT_EQ(m.out_shapes[0], (Shape{3, expected, expected}));
          Rng rng(in * 100 + k * 10 + stride + pad);
          Tensor out = forward(m, random_batch(m, 2, rng));
          EXPECT_EQ(out.shape(), (Shape{2, 2}));
        }
}

TEST(Descriptor, InitializationIsSeededAndDeterministic) {
  Model a = load_arch("toy4.arch", 7), b = load_arch("toy4.arch", 7), c = load_arch("toy4.arch", 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.params, c.params);
  // Kaiming-uniform bound on fan-in.
  const auto& w = a.param(a.require_index("conv2"), "weight");
  const double bound = std::sqrt(6.0 / (16.0 * 9.0));
  for (float v : w.data()) EXPECT_LE(std::abs(v), bound);
}

TEST(Descriptor, ZeroInitFlag) {
  std::string text = read_text(config_path("toy2.arch"));
  text.replace(text.find("init kaiming"), 12, "init zeros");
  Model m = build_model(text, 3);
  for (const auto& ps : m.params)
    for (const auto& p : ps)
      for (float v : p.value.data()) EXPECT_EQ(v, 0.0f);
}
