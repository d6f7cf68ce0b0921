"""
tile_ingest.py

Turn sample locations into imagery. Build static-map requests and fetch
them through a rate-limited, disk-cached client (online mode), or render
procedural city tiles (offline mode, the default). Also build, save and
load the per-city dataset manifest with its train/test splits.

An image is a numpy uint8 array of shape (height, width, 3), row-major RGB.
"""

import os
import io
import math
import json
import time
import hashlib
import logging
import threading
import warnings
import weakref

import numpy as np
import requests
from PIL import Image as PIL_image
from PIL import ImageDraw

import cityssl.modules.common_base as base
import cityssl.modules.geo_sampler as geo_sampler

logger = logging.getLogger(__name__)

STATIC_MAPS_URL = "https://maps.googleapis.com/maps/api/staticmap"
DEFAULT_ZOOM = 16
DEFAULT_SIZE_PX = 256
MAX_FETCH_ATTEMPTS = 3
MANIFEST_VERSION = 1

# class indices of the synthetic layout raster
BACKGROUND = 0
ROAD = 1
TRANSIT = 2
GREENSPACE = 3
WATER = 4

class Style_spec():
    """
    The five flat colors of the abstract map style, as 8-bit RGB
    triples. Defaults: roads black, transit orange, greenspace green,
    water blue, everything else white.
    """

    def __init__(self, road_color=(0, 0, 0), transit_color=(255, 165, 0),
                 greenspace_color=(0, 128, 0), water_color=(0, 0, 255),
                 background_color=(255, 255, 255)):
        self.road_color = tuple(int(c) for c in road_color)
        self.transit_color = tuple(int(c) for c in transit_color)
        self.greenspace_color = tuple(int(c) for c in greenspace_color)
        self.water_color = tuple(int(c) for c in water_color)
        self.background_color = tuple(int(c) for c in background_color)
        return

    def palette(self):
        """
        Return the colors indexed by layout class (BACKGROUND, ROAD,
        TRANSIT, GREENSPACE, WATER).
        """
        return [self.background_color, self.road_color, self.transit_color,
                self.greenspace_color, self.water_color]

    def validate(self):
        """
        Check that every color is a valid RGB triple and that the five
        colors are pairwise distinct.
        """
        colors = self.palette()
        for color in colors:
            if len(color) != 3 or min(color) < 0 or max(color) > 255:
                raise base.Validation_error(
                    "Invalid RGB color: {}".format(color))
        if len(set(colors)) != len(colors):
            raise base.Validation_error(
                "The five style colors must be pairwise distinct.")
        return

    def style_clauses(self):
        """
        Return the static-maps style directives mapping feature classes
        to this style's colors, sorted alphabetically.
        """
        def hex_color(color):
            return "0x{:02x}{:02x}{:02x}".format(*color)
        clauses = [
            "feature:landscape|element:geometry|color:" \
                + hex_color(self.background_color),
            "feature:road|element:geometry|color:" \
                + hex_color(self.road_color),
            "feature:transit|element:geometry|color:" \
                + hex_color(self.transit_color),
            "feature:poi.park|element:geometry|color:" \
                + hex_color(self.greenspace_color),
            "feature:water|element:geometry|color:" \
                + hex_color(self.water_color),
        ]
        return sorted(clauses)

class Tile_record():
    """
    One tile of the dataset.

    Attributes:
    -----------
    city_name : str
        The class label.

    point : Sample_point
        Tile center.

    domain : str
        "satellite" or "map".

    split : str
        "train" or "test".

    index : int
        Index of the sample point within its city.

    cache_path : str
        Path of the PNG relative to the tile cache directory, laid out
        as <domain>/<city_name>/<index>.png.

    zoom : int
        Web-Mercator zoom level.

    size_px : int
        Tile width and height in pixels.
    """

    def __init__(self, city_name, point, domain, split, index, cache_path,
                 zoom=DEFAULT_ZOOM, size_px=DEFAULT_SIZE_PX):
        self.city_name = city_name
        self.point = point
        self.domain = domain
        self.split = split
        self.index = int(index)
        self.cache_path = cache_path
        self.zoom = int(zoom)
        self.size_px = int(size_px)
        return

    def to_dict(self):
        return {"city_name": self.city_name, "point": self.point.to_dict(),
                "domain": self.domain, "split": self.split,
                "index": self.index, "cache_path": self.cache_path,
                "zoom": self.zoom, "size_px": self.size_px}

    @classmethod
    def from_dict(cls, record_dict):
        return cls(record_dict["city_name"],
                   geo_sampler.Sample_point.from_dict(record_dict["point"]),
                   record_dict["domain"], record_dict["split"],
                   record_dict["index"], record_dict["cache_path"],
                   record_dict["zoom"], record_dict["size_px"])

class Dataset_manifest():
    """
    The inventory of a dataset: its cities, every tile record, and the
    parameters the records were generated with.
    """

    def __init__(self, cities, records, samples_per_city, split_ratio, seed):
        self.cities = list(cities)
        self.records = list(records)
        self.samples_per_city = int(samples_per_city)
        self.split_ratio = float(split_ratio)
        self.seed = int(seed)
        return

    def city_names(self):
        return [city.name for city in self.cities]

    def city_index(self):
        """
        Return a dict mapping each city name to its class index.
        """
        return {name: i for i, name in enumerate(self.city_names())}

    def domain_records(self, domain):
        """
        Return the records of one domain, in manifest order.
        """
        if domain not in base.DOMAINS:
            raise base.Config_error("Unsupported domain: {}".format(domain))
        return [record for record in self.records if record.domain == domain]

    def select(self, domain, split=None, city_names=None):
        """
        Return the indices (into domain_records(domain)) of the records
        with the given split and, optionally, restricted to a set of
        cities.
        """
        indices = []
        allowed = None if city_names is None else set(city_names)
        for i, record in enumerate(self.domain_records(domain)):
            if split is not None and record.split != split:
                continue
            if allowed is not None and record.city_name not in allowed:
                continue
            indices.append(i)
        return indices

    def validate(self):
        """
        Check the manifest invariants: known cities, unique cache paths,
        samples_per_city records per city and domain, and exact split
        counts.
        """
        geo_sampler.check_unique_names(self.cities)
        names = set(self.city_names())
        paths = set()
        counts = {}
        n_train = num_train_samples(self.samples_per_city, self.split_ratio)
        for record in self.records:
            if record.city_name not in names:
                raise base.Validation_error(
                    "Record for unknown city: {}".format(record.city_name))
            if record.cache_path in paths:
                raise base.Validation_error(
                    "Duplicate cache path: {}".format(record.cache_path))
            paths.add(record.cache_path)
            key = (record.city_name, record.domain)
            total, train = counts.get(key, (0, 0))
            counts[key] = (total + 1, train + int(record.split == "train"))
        for (city_name, domain), (total, train) in counts.items():
            if total != self.samples_per_city or train != n_train:
                raise base.Validation_error(
                    "City {} has {} {} records ({} train); expected {} ({} "\
                    "train).".format(city_name, total, domain, train,
                                     self.samples_per_city, n_train))
        return

    def to_dict(self):
        return {"version": MANIFEST_VERSION,
                "cities": [city.to_dict() for city in self.cities],
                "records": [record.to_dict() for record in self.records],
                "samples_per_city": self.samples_per_city,
                "split_ratio": self.split_ratio, "seed": self.seed}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, manifest_dict):
        cities = [geo_sampler.City.from_dict(city_dict) for city_dict \
                  in manifest_dict["cities"]]
        records = [Tile_record.from_dict(record_dict) for record_dict \
                   in manifest_dict["records"]]
        return cls(cities, records, manifest_dict["samples_per_city"],
                   manifest_dict["split_ratio"], manifest_dict["seed"])

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

def save_manifest(manifest, manifest_filename):
    """
    Write the manifest as a single JSON document.
    """
    directory = os.path.dirname(os.path.abspath(manifest_filename))
    os.makedirs(directory, exist_ok=True)
    with open(manifest_filename, "w", encoding="utf-8") as manifest_file:
        manifest_file.write(manifest.to_json())
    return

def load_manifest(manifest_filename):
    """
    Read a manifest written by save_manifest().
    """
    if not os.path.exists(manifest_filename):
        raise base.Config_error("No such manifest: {}".format(
            manifest_filename))
    with open(manifest_filename, "r", encoding="utf-8") as manifest_file:
        return Dataset_manifest.from_json(manifest_file.read())

def num_train_samples(samples_per_city, split_ratio):
    """
    Return floor(split_ratio * samples_per_city), robust to the
    representation error of the ratio.
    """
    return int(math.floor(split_ratio * samples_per_city + 1e-9))

def safe_name(city_name):
    """
    Make a city name usable as a single path component.
    """
    return city_name.replace(os.sep, "_").replace("/", "_").strip()

def build_manifest(cities, samples_per_city, split_ratio, seed, mask=None,
                   k=geo_sampler.DEFAULT_RADIUS_K, zoom=DEFAULT_ZOOM,
                   size_px=DEFAULT_SIZE_PX, excluded_countries=(),
                   excluded_cities=(), domains=base.DOMAINS):
    """
    Sample every city and assign train/test splits.

    Every sample location yields one record per domain; both domains
    share the location's split. The split is a seeded shuffle within
    each city, so every city keeps floor(split_ratio * n) training
    records exactly.

    Parameters:
    -----------
    cities : list
        City objects. Names must be unique.

    samples_per_city : int
        At least 2.

    split_ratio : float
        Strictly between 0 and 1.

    seed : int
        Seed for sampling and splitting.

    mask : Water_mask or None
        Water bodies excluded from sampling.

    excluded_countries, excluded_cities : iterable of str
        Blocklist. Matching cities are dropped with a warning.

    Returns:
    --------
    manifest : Dataset_manifest
    """
    if samples_per_city < 2:
        raise base.Config_error("samples_per_city must be at least 2.")
    if not 0.0 < split_ratio < 1.0:
        raise base.Config_error("split_ratio must lie strictly between 0 "\
                                "and 1.")
    excluded_countries = set(excluded_countries)
    excluded_cities = set(excluded_cities)
    kept_cities = []
    for city in cities:
        if city.country in excluded_countries or city.name in excluded_cities:
            warnings.warn("City {} ({}) excluded by the blocklist.".format(
                city.name, city.country))
            continue
        city.validate()
        kept_cities.append(city)
    geo_sampler.check_unique_names(kept_cities)

    n_train = num_train_samples(samples_per_city, split_ratio)
    splits_by_city = {}
    points_by_city = {}
    for city in kept_cities:
        disc = geo_sampler.make_disc(city, k)
        points_by_city[city.name] = geo_sampler.sample_points(
            disc, mask, samples_per_city,
            base.derive_seed(seed, "sample", city.name), city.name)
        split_rng = np.random.Generator(np.random.Philox(
            key=base.derive_seed(seed, "split", city.name)))
        order = split_rng.permutation(samples_per_city)
        splits = ["test"] * samples_per_city
        for i in order[:n_train]:
            splits[int(i)] = "train"
        splits_by_city[city.name] = splits

    records = []
    for domain in domains:
        if domain not in base.DOMAINS:
            raise base.Config_error("Unsupported domain: {}".format(domain))
        for city in kept_cities:
            for i, point in enumerate(points_by_city[city.name]):
                cache_path = "{}/{}/{}.png".format(
                    domain, safe_name(city.name), i)
                records.append(Tile_record(
                    city.name, point, domain, splits_by_city[city.name][i],
                    i, cache_path, zoom, size_px))
    manifest = Dataset_manifest(kept_cities, records, samples_per_city,
                                split_ratio, seed)
    logger.info("built manifest: %d cities, %d records", len(kept_cities),
                len(records))
    return manifest

def build_request(point, domain, zoom, size_px, style, api_key):
    """
    Build the static-maps request URL for one tile.

    The URL encodes the center, zoom, size and map type ("satellite",
    or a styled "roadmap" for the map domain, with one style clause per
    feature class). Parameter order is fixed, so the same inputs always
    give the same string.
    """
    if domain not in base.DOMAINS:
        raise base.Config_error("Unsupported domain: {}".format(domain))
    if size_px <= 0:
        raise base.Config_error("size_px must be positive, not {}".format(
            size_px))
    if not 0 <= zoom <= geo_sampler.MAX_ZOOM:
        raise base.Config_error("zoom must lie in [0, {}]".format(
            geo_sampler.MAX_ZOOM))
    if api_key is None or api_key.strip() == "":
        raise base.Config_error("A nonempty API key is required to build "\
            "online requests (set {}).".format(base.API_KEY_ENV))
    params = [
        ("center", "{:.6f},{:.6f}".format(point.latitude, point.longitude)),
        ("zoom", str(zoom)),
        ("size", "{0}x{0}".format(size_px)),
        ("format", "png"),
    ]
    if domain == "satellite":
        params.append(("maptype", "satellite"))
    else:
        style.validate()
        params.append(("maptype", "roadmap"))
        for clause in style.style_clauses():
            params.append(("style", clause))
    params.append(("key", api_key))
    prepared = requests.Request("GET", STATIC_MAPS_URL, params=params)\
        .prepare()
    return prepared.url

def validate_image(image):
    """
    Check the raster contract of an image array.
    """
    if not isinstance(image, np.ndarray) or image.dtype != np.uint8 \
            or image.ndim != 3 or image.shape[2] != 3 \
            or image.shape[0] == 0 or image.shape[1] == 0:
        raise base.Validation_error("An image must be a nonempty uint8 "\
                                    "array of shape (height, width, 3).")
    return

def decode_png(data):
    """
    Decode PNG (or any Pillow-readable) bytes into an RGB image array.
    """
    try:
        with PIL_image.open(io.BytesIO(data)) as pil_image:
            return np.asarray(pil_image.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError, SyntaxError) as err:
        raise base.Corrupt_tile_error("Tile could not be decoded: {}".format(
            err))

def read_png(png_filename):
    """
    Read a cached tile. A tile that cannot be decoded is deleted from the
    cache and a Corrupt_tile_error is raised.
    """
    with open(png_filename, "rb") as png_file:
        data = png_file.read()
    try:
        return decode_png(data)
    except base.Corrupt_tile_error:
        os.remove(png_filename)
        raise

def save_png_atomic(image, png_filename):
    """
    Write an image as PNG through a temporary file and an atomic rename,
    so that concurrent writers never expose a partial file.
    """
    buffer = io.BytesIO()
    PIL_image.fromarray(image).save(buffer, format="PNG")
    base.write_bytes_atomic(png_filename, buffer.getvalue())
    return

def downsample(image, size):
    """
    Resize an image to size x size pixels with bilinear resampling.
    """
    if image.shape[0] == size and image.shape[1] == size:
        return image
    pil_image = PIL_image.fromarray(image)
    return np.asarray(pil_image.resize((size, size), PIL_image.BILINEAR),
                      dtype=np.uint8).copy()

class Token_bucket():
    """
    A thread-safe token-bucket rate limiter. With capacity 1 the first
    request passes immediately and later requests are spaced 1/rate
    seconds apart.
    """

    def __init__(self, rate, capacity=1.0, clock=time.monotonic,
                 sleep=time.sleep):
        if rate <= 0.0:
            raise base.Config_error("rate_limit must be positive.")
        self.rate = float(rate)
        self.capacity = float(capacity)
        self.tokens = float(capacity)
        self.clock = clock
        self.sleep = sleep
        self.last = clock()
        self.lock = threading.Lock()
        return

    def _refill(self):
        now = self.clock()
        self.tokens = min(self.capacity,
                          self.tokens + (now - self.last) * self.rate)
        self.last = now
        return

    def acquire(self):
        """
        Block until a token is available, then take it.
        """
        with self.lock:
            self._refill()
            if self.tokens < 1.0:
                self.sleep((1.0 - self.tokens) / self.rate)
                self._refill()
            self.tokens -= 1.0
        return

class Tile_fetcher():
    """
    A static-maps client with a PNG disk cache, a rate limit, and
    retries with exponential backoff.

    Attributes:
    -----------
    cache_dir : str
        Root of the tile cache.

    bucket : Token_bucket
        Shared rate limiter for every request of this fetcher.

    session : requests.Session
        The HTTP session. Any object with a compatible get() works.

    max_attempts : int, Default 3
        HTTP attempts before a Fetch_error is raised.

    backoff_s : float, Default 0.5
        Delay before the second attempt; doubled for every retry.

    network_calls : int
        Count of HTTP requests actually sent.
    """

    def __init__(self, cache_dir, rate_limit, session=None,
                 max_attempts=MAX_FETCH_ATTEMPTS, backoff_s=0.5,
                 timeout_s=30.0, clock=time.monotonic, sleep=time.sleep):
        self.cache_dir = cache_dir
        self.bucket = Token_bucket(rate_limit, clock=clock, sleep=sleep)
        if session is None:
            session = requests.Session()
        self.session = session
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.sleep = sleep
        self.network_calls = 0
        return

    def cache_filename(self, url, relative_path=None):
        if relative_path is None:
            digest = hashlib.sha256(url.encode("utf-8")).hexdigest()
            relative_path = os.path.join("requests", digest + ".png")
        return os.path.join(self.cache_dir, relative_path)

    def fetch(self, url, relative_path=None):
        """
        Return the tile for a request URL, from the cache when present.
        Otherwise fetch it, store it as PNG and return the decoded image.
        """
        cache_filename = self.cache_filename(url, relative_path)
        if os.path.exists(cache_filename):
            return read_png(cache_filename)

        status = None
        response = None
        for attempt in range(self.max_attempts):
            self.bucket.acquire()
            self.network_calls += 1
            try:
                response = self.session.get(url, timeout=self.timeout_s)
            except requests.RequestException as err:
                logger.warning("tile request failed (attempt %d of %d): %s",
                               attempt+1, self.max_attempts, err)
                status = None
                response = None
            else:
                if response.status_code == 200:
                    break
                status = response.status_code
                logger.warning("tile request returned HTTP %d (attempt %d of"\
                               " %d)", status, attempt+1, self.max_attempts)
                response = None
            if attempt < self.max_attempts - 1:
                self.sleep(self.backoff_s * 2**attempt)

        if response is None:
            raise base.Fetch_error("Tile request failed after {} attempts"\
                                   .format(self.max_attempts), status=status)
        image = decode_png(response.content)
        save_png_atomic(image, cache_filename)
        return image

# session -> {(cache_dir, rate_limit): Tile_fetcher}; entries go with the session
_FETCHERS = weakref.WeakKeyDictionary()
_FETCHERS_LOCK = threading.Lock()
_DEFAULT_SESSION = requests.Session()

def fetch_tile(request, cache_dir, rate_limit, session=None,
               relative_path=None):
    """
    Fetch one tile through the Tile_fetcher shared by every call with the
    same cache directory, rate limit and session, so the rate limit
    holds across calls. Calls without a session share one module-level
    requests session.
    """
    if session is None:
        session = _DEFAULT_SESSION
    key = (os.path.abspath(cache_dir), float(rate_limit))
    with _FETCHERS_LOCK:
        fetchers = _FETCHERS.setdefault(session, {})
        if key not in fetchers:
            fetchers[key] = Tile_fetcher(cache_dir, rate_limit,
                                         session=weakref.proxy(session))
        fetcher = fetchers[key]
    return fetcher.fetch(request, relative_path)

class City_style():
    """
    The per-city parameters of the procedural renderer. They depend only
    on the city name and the dataset seed, so every tile of a city shares
    them.
    """

    def __init__(self, city_name, seed):
        rng = np.random.Generator(np.random.Philox(
            key=base.derive_seed(seed, "city_style", city_name)))
        self.road_spacing = float(rng.uniform(14.0, 56.0))
        self.road_angle = float(rng.uniform(0.0, 90.0))
        self.road_width = int(rng.integers(1, 6))
        self.cross_ratio = float(rng.uniform(0.6, 2.5))
        self.mean_green_patches = float(rng.uniform(0.0, 4.0))
        self.mean_water_patches = float(rng.uniform(0.0, 2.0))
        self.mean_transit_lines = float(rng.uniform(0.0, 2.0))
        self.patch_scale = float(rng.uniform(20.0, 70.0))
        self.tones = np.array([
            rng.uniform([120, 110, 95], [190, 175, 160]),
            rng.uniform([55, 55, 55], [115, 115, 115]),
            rng.uniform([120, 85, 65], [175, 125, 95]),
            rng.uniform([35, 75, 35], [95, 135, 85]),
            rng.uniform([15, 45, 80], [65, 95, 145]),
        ], dtype=np.float64)
        self.noise_amplitude = float(rng.uniform(6.0, 24.0))
        return

    def expected_road_density(self):
        """
        Approximate fraction of road pixels implied by the grid spacing
        and line width.
        """
        return min(1.0, self.road_width / self.road_spacing \
                   * (1.0 + 1.0 / self.cross_ratio))

def _star_polygon(rng, center, radius):
    num_vertices = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, num_vertices))
    radii = radius * rng.uniform(0.6, 1.0, num_vertices)
    return [(float(center[0] + r * math.cos(a)),
             float(center[1] + r * math.sin(a))) for r, a in zip(radii, angles)]

def _draw_line_family(draw, size_px, angle_deg, spacing, phase, width, value):
    angle = math.radians(angle_deg)
    direction = (math.cos(angle), math.sin(angle))
    normal = (-direction[1], direction[0])
    half = size_px / 2.0
    reach = size_px * 1.5
    num_lines = int(reach / spacing) + 1
    for k in range(-num_lines, num_lines + 1):
        offset = phase + k * spacing
        center = (half + offset * normal[0], half + offset * normal[1])
        start = (center[0] - reach * direction[0],
                 center[1] - reach * direction[1])
        end = (center[0] + reach * direction[0],
               center[1] + reach * direction[1])
        draw.line([start, end], fill=value, width=width)
    return

def render_layout(city_name, point, size_px, seed):
    """
    Rasterize the semantic layout of one synthetic tile: a uint8 array of
    class indices (BACKGROUND, ROAD, TRANSIT, GREENSPACE, WATER).

    The road grid's spacing, angle and line width come from the city's
    City_style; grid phase, small angle jitter and the green, water and
    transit patches come from a hash of the point.
    """
    style = City_style(city_name, seed)
    rng = np.random.Generator(np.random.Philox(key=base.derive_seed(
        seed, "tile", city_name, "{:.7f}".format(point.latitude),
        "{:.7f}".format(point.longitude))))
    layout = PIL_image.new("L", (size_px, size_px), BACKGROUND)
    draw = ImageDraw.Draw(layout)
    scale = size_px / float(DEFAULT_SIZE_PX)

    for value, mean_count in [(GREENSPACE, style.mean_green_patches),
                              (WATER, style.mean_water_patches)]:
        for i in range(int(rng.poisson(mean_count))):
            center = rng.uniform(0.0, size_px, 2)
            radius = style.patch_scale * scale * rng.uniform(0.5, 1.5)
            draw.polygon(_star_polygon(rng, center, radius), fill=value)

    spacing = style.road_spacing * scale
    angle = style.road_angle + rng.uniform(-3.0, 3.0)
    width = max(1, int(round(style.road_width * scale)))
    _draw_line_family(draw, size_px, angle, spacing,
                      rng.uniform(0.0, spacing), width, ROAD)
    cross_spacing = spacing * style.cross_ratio
    _draw_line_family(draw, size_px, angle + 90.0, cross_spacing,
                      rng.uniform(0.0, cross_spacing), width, ROAD)

    for i in range(int(rng.poisson(style.mean_transit_lines))):
        transit_angle = rng.uniform(0.0, 180.0)
        transit_spacing = size_px * 4.0
        _draw_line_family(draw, size_px, transit_angle, transit_spacing,
                          rng.uniform(-size_px / 2.0, size_px / 2.0),
                          max(2, width + 1), TRANSIT)
    return np.asarray(layout, dtype=np.uint8).copy(), style, rng

def render_synthetic_tile(city, point, domain, style, size_px, seed):
    """
    Render one procedural city tile.

    Map tiles use exactly the five colors of the Style_spec. Satellite
    tiles draw the same layout with per-class earth tones modulated by
    low- and high-frequency noise.

    Parameters:
    -----------
    city : City or str
        The city (or its name) the tile belongs to.

    point : Sample_point
        The tile center.

    domain : str
        "satellite" or "map".

    style : Style_spec
        Map colors.

    size_px : int
        Output width and height.

    seed : int
        Dataset seed.

    Returns:
    --------
    image : numpy.ndarray
        uint8 array of shape (size_px, size_px, 3).
    """
    if domain not in base.DOMAINS:
        raise base.Config_error("Unsupported domain: {}".format(domain))
    city_name = city if isinstance(city, str) else city.name
    layout, city_style, rng = render_layout(city_name, point, size_px, seed)
    if domain == "map":
        palette = np.array(style.palette(), dtype=np.uint8)
        return palette[layout]

    tones = city_style.tones[layout]
    coarse = rng.normal(0.0, 1.0, (9, 9)).astype(np.float32)
    coarse = np.asarray(PIL_image.fromarray(coarse).resize(
        (size_px, size_px), PIL_image.BILINEAR), dtype=np.float64)
    fine = rng.normal(0.0, city_style.noise_amplitude, (size_px, size_px, 3))
    pixels = tones * (1.0 + 0.12 * coarse[:, :, None]) + fine
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)

class Tile_source():
    """
    Produce the image of a Tile_record according to the run mode.

    Attributes:
    -----------
    mode : str
        "synthetic" renders tiles (reading and filling the cache when a
        cache_dir is given), "cache_only" only reads the cache, and
        "online" fetches missing tiles from the static-maps API.

    cache_dir : str or None
        Root of the tile cache.

    seed : int
        Dataset seed used by the renderer.
    """

    def __init__(self, mode="synthetic", cache_dir=None, seed=0, style=None,
                 fetcher=None, api_key=""):
        if mode not in ["synthetic", "cache_only", "online"]:
            raise base.Config_error("Unknown tile source mode: {}".format(
                mode))
        if mode in ["cache_only", "online"] and cache_dir is None:
            raise base.Config_error("Mode {} needs a cache_dir.".format(mode))
        if mode == "online" and fetcher is None:
            raise base.Config_error("Online mode needs a Tile_fetcher.")
        self.mode = mode
        self.cache_dir = cache_dir
        self.seed = seed
        if style is None:
            style = Style_spec()
        style.validate()
        self.style = style
        self.fetcher = fetcher
        self.api_key = api_key
        return

    def load(self, record, domain=None):
        """
        Return the image of a record, optionally in another domain than
        the record's own (both domains share locations).
        """
        if domain is None:
            domain = record.domain
        relative_path = "{}/{}/{}.png".format(
            domain, safe_name(record.city_name), record.index)
        cache_filename = None
        if self.cache_dir is not None:
            cache_filename = os.path.join(self.cache_dir, relative_path)
            if os.path.exists(cache_filename):
                return read_png(cache_filename)
        if self.mode == "cache_only":
            raise base.Missing_tile_error("Tile not in cache: {}".format(
                cache_filename))
        if self.mode == "online":
            url = build_request(record.point, domain, record.zoom,
                                record.size_px, self.style, self.api_key)
            return self.fetcher.fetch(url, relative_path)
        image = render_synthetic_tile(record.city_name, record.point, domain,
                                      self.style, record.size_px, self.seed)
        if cache_filename is not None:
            save_png_atomic(image, cache_filename)
        return image

def load_batch(manifest, indices, domain, source=None):
    """
    Return the images of the given records (indices into
    manifest.domain_records(domain)), in index order.
    """
    records = manifest.domain_records(domain)
    if source is None:
        source = Tile_source("synthetic", seed=manifest.seed)
    images = []
    for index in indices:
        if not 0 <= index < len(records):
            raise base.Validation_error("Record index out of range: {}"\
                                        .format(index))
        images.append(source.load(records[index], domain))
    return images

def make_tile_source(config, manifest, session=None):
    """
    Build the Tile_source an Experiment_config asks for. Offline runs
    render every tile from the manifest seed without touching the shared
    cache; online mode reads the API key from the environment.
    """
    if config.offline:
        return Tile_source("synthetic", seed=manifest.seed)
    api_key = os.environ.get(base.API_KEY_ENV, "")
    if api_key == "":
        raise base.Config_error("Online mode requires the {} environment "\
                                "variable.".format(base.API_KEY_ENV))
    fetcher = Tile_fetcher(config.cache_dir, config.rate_limit,
                           session=session)
    return Tile_source("online", cache_dir=config.cache_dir,
                       seed=manifest.seed, fetcher=fetcher, api_key=api_key)
