#include "retiscreen/synthetic_fundus.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "retiscreen/rng.hpp"

namespace retiscreen {

void SynthParams::validate() const {
  if (image_size < 16) throw std::invalid_argument("synth image_size must be >= 16");
  if (lesion_counts_by_grade[0] != std::pair{0, 0}) throw std::invalid_argument("grade 0 lesion range must be (0,0)");
  for (std::size_t g = 0; g < 5; ++g) {
    const auto [lo, hi] = lesion_counts_by_grade[g];
    if (lo < 0 || hi < lo) throw std::invalid_argument("bad lesion range for grade " + std::to_string(g));
    if (g > 0) {
      const auto [plo, phi] = lesion_counts_by_grade[g - 1];
      if (lo <= plo || hi <= phi) throw std::invalid_argument("lesion ranges must be strictly increasing in grade");
    }
    if (me_probability_by_grade[g] < 0.0 || me_probability_by_grade[g] > 1.0)
      throw std::invalid_argument("ME probabilities must lie in [0,1]");
  }
  if (me_probability_by_grade[0] != 0.0) throw std::invalid_argument("grade 0 eyes never carry ME");
  if (images_per_eye < 1) throw std::invalid_argument("images_per_eye must be >= 1");
  if (me_exudate_radius < 0.0 || illumination_gradient_amplitude < 0.0 || illumination_gradient_amplitude >= 1.0)
    throw std::invalid_argument("bad exudate radius or illumination amplitude");
}

namespace {

struct Canvas {
  int size;
  std::vector<double> r, g, b;
  std::vector<double> lesion;  // coverage in [0,1]

  explicit Canvas(int s)
      : size(s), r(s * s, 0.0), g(s * s, 0.0), b(s * s, 0.0), lesion(s * s, 0.0) {}

  // Anti-aliased disk: coverage ramps linearly over one pixel at the rim.
  template <typename F>
  void disk(double cx, double cy, double radius, F&& paint) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + radius + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + radius + 1)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
        const double cover = std::clamp(radius + 0.5 - d, 0.0, 1.0);
        if (cover > 0.0) paint(static_cast<std::size_t>(y) * size + x, cover);
      }
  }

  void blend(std::size_t i, double cover, double cr, double cg, double cb) {
    r[i] += cover * (cr - r[i]);
    g[i] += cover * (cg - g[i]);
    b[i] += cover * (cb - b[i]);
  }
};

}  // namespace

SynthImage generate_image(Grade grade, bool me, Side laterality, const SynthParams& params, std::uint64_t seed) {
  params.validate();
  Rng rng(seed);
  const int s = params.image_size;
  const double sd = static_cast<double>(s);
  const double cx = sd / 2.0;
  const double cy = sd / 2.0;
  const double field_r = 0.46 * sd;
  Canvas canvas(s);

  // Retinal background: orange-red with a mild radial falloff.
  const double base_r = rng.uniform(150.0, 180.0);
  const double base_g = rng.uniform(65.0, 85.0);
  const double base_b = rng.uniform(30.0, 45.0);
  std::vector<bool> inside(static_cast<std::size_t>(s) * s, false);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      if (d > field_r) continue;
      const auto i = static_cast<std::size_t>(y) * s + x;
      inside[i] = true;
      const double fall = 1.0 - 0.25 * (d / field_r) * (d / field_r);
      canvas.r[i] = base_r * fall;
      canvas.g[i] = base_g * fall;
      canvas.b[i] = base_b * fall;
    }

  // Optic disc on the laterality side.
  double disc_x = rng.uniform(0.20, 0.28) * sd;
  if (laterality == Side::right) disc_x = sd - disc_x;
  const double disc_y = cy + rng.uniform(-0.05, 0.05) * sd;
  const double disc_r = rng.uniform(0.07, 0.09) * sd;
  canvas.disk(disc_x, disc_y, disc_r, [&](std::size_t i, double c) { canvas.blend(i, c, 245.0, 215.0, 150.0); });

  // Red dots, kept inside the field and off the disc.
  const auto [lo, hi] = params.lesion_counts_by_grade[static_cast<std::size_t>(to_int(grade))];
  const int count = lo == hi ? lo : static_cast<int>(rng.uniform_int(lo, hi));
  for (int k = 0; k < count; ++k) {
    const double radius = rng.uniform(1.0, 2.5);
    double x = 0.0, y = 0.0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double rho = (field_r - 4.0) * std::sqrt(rng.uniform());
      const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
      x = cx + rho * std::cos(phi);
      y = cy + rho * std::sin(phi);
      if (std::hypot(x - disc_x, y - disc_y) > disc_r + radius + 2.0) break;
    }
    const double shade = rng.uniform(0.85, 1.0);
    canvas.disk(x, y, radius, [&](std::size_t i, double c) {
      canvas.blend(i, c, 95.0 * shade, 20.0 * shade, 15.0 * shade);
      canvas.lesion[i] = std::max(canvas.lesion[i], c);
    });
  }

  // Exudate cluster near the field centre.
  if (me) {
    const int blobs = static_cast<int>(rng.uniform_int(3, 6));
    for (int k = 0; k < blobs; ++k) {
      const double radius = rng.uniform(1.5, 3.0);
      // Whole blob stays inside the exudate radius.
      const double rho = std::max(0.0, params.me_exudate_radius - radius) * std::sqrt(rng.uniform());
      const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
      canvas.disk(cx + rho * std::cos(phi), cy + rho * std::sin(phi), radius, [&](std::size_t i, double c) {
        canvas.blend(i, c, 235.0, 220.0, 95.0);
        canvas.lesion[i] = std::max(canvas.lesion[i], c);
      });
    }
  }

  // Multiplicative illumination ramp in a random direction plus camera gain.
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amp = params.illumination_gradient_amplitude * rng.uniform(0.5, 1.0);
  const double gain = 1.0 + rng.uniform(-params.gain_jitter, params.gain_jitter);
  const double ux = std::cos(angle), uy = std::sin(angle);

  SynthImage out;
  out.raw = RawImage(s, s);
  out.lesion_mask.assign(static_cast<std::size_t>(s) * s, 0);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const auto i = static_cast<std::size_t>(y) * s + x;
      if (!inside[i]) {
        // Keep the lesion mask confined to what was painted.
        continue;
      }
      const double t = ((x + 0.5 - cx) * ux + (y + 0.5 - cy) * uy) / (sd / 2.0);
      const double f = gain * (1.0 + amp * t);
      const double channel[3] = {canvas.r[i], canvas.g[i], canvas.b[i]};
      for (int c = 0; c < 3; ++c) {
        const double v = channel[c] * f + rng.normal(0.0, params.noise_sd);
        out.raw.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
      if (canvas.lesion[i] >= 0.5) out.lesion_mask[i] = 255;
    }
  // Rim coverage below 0.5 can leave a tiny dot unmarked; mark its peak pixel.
  if ((count > 0 || me) && std::none_of(out.lesion_mask.begin(), out.lesion_mask.end(), [](auto v) { return v; })) {
    const auto peak = std::max_element(canvas.lesion.begin(), canvas.lesion.end()) - canvas.lesion.begin();
    out.lesion_mask[static_cast<std::size_t>(peak)] = 255;
  }

  out.laterality = laterality;
  out.eye_grade.grade = grade;
  out.eye_grade.me = me;
  out.eye_grade.gradable = true;
  out.eye_grade.grader_count = 2;
  out.disc_x = disc_x;
  out.disc_y = disc_y;
  out.lesion_count = count;
  return out;
}

std::filesystem::path mask_path_for(const std::filesystem::path& image_path) {
  auto p = image_path;
  p.replace_extension();
  p += ".mask.png";
  return p;
}

Manifest generate_dataset(int n_patients, std::span<const double> grade_distribution, const SynthParams& params,
                          std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (n_patients <= 0) throw std::invalid_argument("generate_dataset: n_patients must be positive");
  if (grade_distribution.size() != 5) throw std::invalid_argument("grade distribution needs 5 entries");
  double total = 0.0;
  for (double p : grade_distribution) {
    if (p < 0.0) throw std::invalid_argument("grade probabilities must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("grade distribution must sum to 1");
  params.validate();

  std::filesystem::create_directories(out_dir / "images");
  Manifest manifest;
  manifest.base_dir = out_dir;
  const int digits = std::max(5, static_cast<int>(std::to_string(n_patients).size()));
  for (int p = 0; p < n_patients; ++p) {
    const auto number = std::to_string(p + 1);
    const std::string pid = "P" + std::string(static_cast<std::size_t>(digits) - number.size(), '0') + number;
    ExamRecord exam;
    exam.patient_id = pid;
    exam.exam_id = pid + "-E1";
    Rng label_rng(derive_seed(seed, {0x6c61, static_cast<std::uint64_t>(p)}));
    for (Side side : {Side::left, Side::right}) {
      const auto grade = grade_from_int(static_cast<int>(label_rng.categorical(grade_distribution)));
      const bool me = label_rng.bernoulli(params.me_probability_by_grade[static_cast<std::size_t>(to_int(grade))]);
      EyeGrade eg;
      eg.grade = grade;
      eg.me = me;
      eg.grader_count = 2;
      exam.eye(side) = eg;
      for (int k = 0; k < params.images_per_eye; ++k) {
        const auto img_seed = derive_seed(seed, {static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(side),
                                                 static_cast<std::uint64_t>(k)});
        const auto img = generate_image(grade, me, side, params, img_seed);
        const std::string rel =
            "images/" + pid + "_" + (side == Side::left ? "L" : "R") + std::to_string(k) + ".png";
        write_png(out_dir / rel, img.raw);
        write_gray8_png(mask_path_for(out_dir / rel), img.raw.width, img.raw.height, img.lesion_mask);
        exam.images.push_back({rel, side});
      }
    }
    // Exports do not arrive sorted by eye.
    label_rng.shuffle(exam.images);
    manifest.exams.push_back(std::move(exam));
  }
  write_manifest(out_dir / "manifest.jsonl", manifest);
  return manifest;
}

}  // namespace retiscreen
