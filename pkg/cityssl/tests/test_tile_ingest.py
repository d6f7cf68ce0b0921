"""
test_tile_ingest.py
"""

import gc
import io
import os
import urllib.parse
import weakref

import pytest
import numpy as np
import requests
from PIL import Image as PIL_image

import cityssl.modules.common_base as base
import cityssl.modules.geo_sampler as geo_sampler
import cityssl.modules.tile_ingest as tile_ingest

class Fake_clock():
    """
    A clock that only advances when something sleeps on it.
    """
    def __init__(self):
        self.now = 0.0
        self.sleeps = []
        return

    def clock(self):
        return self.now

    def sleep(self, seconds):
        self.sleeps.append(seconds)
        self.now += seconds
        return

class Fake_response():
    def __init__(self, status_code, content=b""):
        self.status_code = status_code
        self.content = content
        return

class Fake_session():
    """
    Replays a fixed list of responses (or exceptions) and counts calls.
    """
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0
        return

    def get(self, url, timeout=None):
        response = self.responses[min(self.calls, len(self.responses)-1)]
        self.calls += 1
        if isinstance(response, Exception):
            raise response
        return response

def png_bytes(color=(10, 200, 30), size=8):
    image = np.zeros((size, size, 3), dtype=np.uint8)
    image[:, :] = color
    buffer = io.BytesIO()
    PIL_image.fromarray(image).save(buffer, format="PNG")
    return buffer.getvalue()

def make_fetcher(cache_dir, responses, rate_limit=1000.0, max_attempts=3):
    fake_clock = Fake_clock()
    session = Fake_session(responses)
    fetcher = tile_ingest.Tile_fetcher(
        str(cache_dir), rate_limit, session=session,
        max_attempts=max_attempts, clock=fake_clock.clock,
        sleep=fake_clock.sleep)
    return fetcher, session, fake_clock

def test_build_manifest(tiny_manifest):
    tiny_manifest.validate()
    assert len(tiny_manifest.cities) == 4
    assert len(tiny_manifest.records) == 2 * 4 * 10
    for domain in base.DOMAINS:
        records = tiny_manifest.domain_records(domain)
        assert len(records) == 40
        for city_name in tiny_manifest.city_names():
            train = tiny_manifest.select(domain, "train", [city_name])
            test = tiny_manifest.select(domain, "test", [city_name])
            assert len(train) == 8
            assert len(test) == 2
    satellite = tiny_manifest.domain_records("satellite")
    abstract_map = tiny_manifest.domain_records("map")
    for satellite_record, map_record in zip(satellite, abstract_map):
        assert satellite_record.split == map_record.split
        assert satellite_record.point == map_record.point
        assert satellite_record.cache_path != map_record.cache_path
    return

def test_build_manifest_reproducible():
    cities = geo_sampler.synthetic_cities(3, 5)
    first = tile_ingest.build_manifest(cities, 6, 0.5, 17)
    second = tile_ingest.build_manifest(cities, 6, 0.5, 17)
    assert first.to_json() == second.to_json()
    third = tile_ingest.build_manifest(cities, 6, 0.5, 18)
    assert first.to_json() != third.to_json()
    return

def test_build_manifest_errors():
    cities = geo_sampler.synthetic_cities(2, 0)
    with pytest.raises(base.Config_error):
        tile_ingest.build_manifest(cities, 1, 0.8, 0)
    with pytest.raises(base.Config_error):
        tile_ingest.build_manifest(cities, 10, 1.0, 0)
    with pytest.raises(base.Config_error):
        tile_ingest.build_manifest(cities, 10, 0.5, 0, domains=["infrared"])
    twins = [geo_sampler.City("Twin", "A", 10.0, 10.0, 500000),
             geo_sampler.City("Twin", "B", 20.0, 20.0, 500000)]
    with pytest.raises(base.Validation_error):
        tile_ingest.build_manifest(twins, 4, 0.5, 0)
    return

def test_build_manifest_blocklist(cities_filename):
    cities = geo_sampler.read_cities_csv(cities_filename)
    with pytest.warns(UserWarning):
        manifest = tile_ingest.build_manifest(
            cities, 4, 0.5, 0, excluded_countries=["Borealis"],
            excluded_cities=["Dunmore"])
    assert manifest.city_names() == ["Lakeview", "Port Ember", "Ravenholm"]
    return

def test_build_manifest_water_mask(cities_filename, water_mask_filename):
    cities = geo_sampler.read_cities_csv(cities_filename)
    mask = geo_sampler.read_water_mask(water_mask_filename)
    manifest = tile_ingest.build_manifest(cities, 20, 0.5, 3, mask=mask)
    for record in manifest.records:
        assert not geo_sampler.point_in_mask(record.point, mask)
    return

def test_manifest_save_load(tiny_manifest, tmp_path):
    manifest_filename = str(tmp_path / "nested" / "manifest.json")
    tile_ingest.save_manifest(tiny_manifest, manifest_filename)
    loaded = tile_ingest.load_manifest(manifest_filename)
    assert loaded.to_dict() == tiny_manifest.to_dict()
    loaded.validate()
    with pytest.raises(base.Config_error):
        tile_ingest.load_manifest(str(tmp_path / "missing.json"))
    return

def test_manifest_validate_detects_bad_split(tiny_manifest):
    record = tiny_manifest.domain_records("satellite")[0]
    record.split = "test" if record.split == "train" else "train"
    with pytest.raises(base.Validation_error):
        tiny_manifest.validate()
    return

def test_num_train_samples():
    assert tile_ingest.num_train_samples(200, 0.8) == 160
    assert tile_ingest.num_train_samples(10, 0.7) == 7
    assert tile_ingest.num_train_samples(3, 0.5) == 1
    return

def test_build_request_satellite():
    point = geo_sampler.Sample_point(41.878100, -87.629800, "Lakeview")
    style = tile_ingest.Style_spec()
    url = tile_ingest.build_request(point, "satellite", 16, 256, style,
                                    "secret")
    assert url == tile_ingest.build_request(point, "satellite", 16, 256,
                                            style, "secret")
    assert url.startswith(tile_ingest.STATIC_MAPS_URL + "?")
    params = urllib.parse.parse_qsl(urllib.parse.urlsplit(url).query)
    assert params == [("center", "41.878100,-87.629800"), ("zoom", "16"),
                      ("size", "256x256"), ("format", "png"),
                      ("maptype", "satellite"), ("key", "secret")]
    return

def test_build_request_map():
    point = geo_sampler.Sample_point(-33.8688, 151.2093, "Dunmore")
    url = tile_ingest.build_request(point, "map", 16, 256,
                                    tile_ingest.Style_spec(), "secret")
    params = urllib.parse.parse_qsl(urllib.parse.urlsplit(url).query)
    assert ("maptype", "roadmap") in params
    styles = [value for name, value in params if name == "style"]
    assert styles == sorted(styles)
    assert len(styles) == 5
    assert "feature:road|element:geometry|color:0x000000" in styles
    assert "feature:water|element:geometry|color:0x0000ff" in styles
    assert params[-1] == ("key", "secret")
    return

def test_build_request_errors():
    point = geo_sampler.Sample_point(0.0, 0.0, "c")
    style = tile_ingest.Style_spec()
    with pytest.raises(base.Config_error):
        tile_ingest.build_request(point, "infrared", 16, 256, style, "k")
    with pytest.raises(base.Config_error):
        tile_ingest.build_request(point, "map", 16, 0, style, "k")
    with pytest.raises(base.Config_error):
        tile_ingest.build_request(point, "map", 23, 256, style, "k")
    with pytest.raises(base.Config_error):
        tile_ingest.build_request(point, "satellite", 16, 256, style, "")
    return

def test_style_spec_validate():
    tile_ingest.Style_spec().validate()
    with pytest.raises(base.Validation_error):
        tile_ingest.Style_spec(road_color=(255, 255, 255)).validate()
    with pytest.raises(base.Validation_error):
        tile_ingest.Style_spec(road_color=(0, 0, 300)).validate()
    return

def test_token_bucket():
    fake_clock = Fake_clock()
    bucket = tile_ingest.Token_bucket(2.0, clock=fake_clock.clock,
                                      sleep=fake_clock.sleep)
    for i in range(10):
        bucket.acquire()
    assert fake_clock.now == pytest.approx(4.5)
    with pytest.raises(base.Config_error):
        tile_ingest.Token_bucket(0.0)
    return

def test_fetcher_success_and_cache(tmp_path):
    fetcher, session, fake_clock = make_fetcher(
        tmp_path, [Fake_response(200, png_bytes())])
    image = fetcher.fetch("https://example.invalid/tile?a=1")
    assert image.shape == (8, 8, 3)
    assert image.dtype == np.uint8
    assert tuple(image[0, 0]) == (10, 200, 30)
    again = fetcher.fetch("https://example.invalid/tile?a=1")
    assert np.array_equal(image, again)
    assert session.calls == 1
    assert fetcher.network_calls == 1
    return

def test_fetcher_retries(tmp_path):
    fetcher, session, fake_clock = make_fetcher(
        tmp_path, [Fake_response(503), requests.ConnectionError("down"),
                   Fake_response(200, png_bytes())])
    image = fetcher.fetch("https://example.invalid/tile?b=2", "map/x/0.png")
    assert image.shape == (8, 8, 3)
    assert session.calls == 3
    assert os.path.exists(str(tmp_path / "map" / "x" / "0.png"))
    backoffs = [seconds for seconds in fake_clock.sleeps if seconds > 0.01]
    assert backoffs == [0.5, 1.0]
    return

def test_fetcher_gives_up(tmp_path):
    fetcher, session, fake_clock = make_fetcher(
        tmp_path, [Fake_response(503)])
    with pytest.raises(base.Fetch_error) as excinfo:
        fetcher.fetch("https://example.invalid/tile?c=3")
    assert excinfo.value.status == 503
    assert session.calls == 3
    assert os.listdir(str(tmp_path)) == []
    return

def test_fetcher_corrupt_response(tmp_path):
    fetcher, session, fake_clock = make_fetcher(
        tmp_path, [Fake_response(200, b"definitely not a png")])
    with pytest.raises(base.Corrupt_tile_error):
        fetcher.fetch("https://example.invalid/tile?d=4")
    return

def test_read_png_deletes_corrupt_file(tmp_path):
    png_filename = str(tmp_path / "bad.png")
    with open(png_filename, "wb") as png_file:
        png_file.write(b"\x89PNG truncated")
    with pytest.raises(base.Corrupt_tile_error):
        tile_ingest.read_png(png_filename)
    assert not os.path.exists(png_filename)
    return

def test_fetch_tile_shares_fetcher(tmp_path):
    session = Fake_session([Fake_response(200, png_bytes((1, 2, 3)))])
    url = "https://example.invalid/tile?e=5"
    first = tile_ingest.fetch_tile(url, str(tmp_path), 1000.0, session)
    second = tile_ingest.fetch_tile(url, str(tmp_path), 1000.0, session)
    assert np.array_equal(first, second)
    assert session.calls == 1
    return

def test_fetch_tile_releases_session(tmp_path):
    session = Fake_session([Fake_response(200, png_bytes((4, 5, 6)))])
    tile_ingest.fetch_tile("https://example.invalid/tile?f=6",
                           str(tmp_path), 1000.0, session)
    assert session in tile_ingest._FETCHERS
    session_ref = weakref.ref(session)
    del session
    gc.collect()
    assert session_ref() is None

    other = Fake_session([Fake_response(200, png_bytes((4, 5, 6)))])
    tile_ingest.fetch_tile("https://example.invalid/tile?f=7",
                           str(tmp_path), 1000.0, other)
    assert other.calls == 1
    assert list(tile_ingest._FETCHERS[other].keys()) \
        == [(os.path.abspath(str(tmp_path)), 1000.0)]
    return

def test_render_map_tile_palette(tiny_manifest):
    style = tile_ingest.Style_spec()
    palette = set(style.palette())
    for record in tiny_manifest.domain_records("map")[:5]:
        image = tile_ingest.render_synthetic_tile(
            record.city_name, record.point, "map", style, 64, 0)
        assert image.shape == (64, 64, 3)
        colors = set(map(tuple, image.reshape(-1, 3).tolist()))
        assert colors <= palette
        assert style.road_color in colors
    return

def test_render_tile_deterministic(tiny_manifest):
    record = tiny_manifest.domain_records("satellite")[3]
    style = tile_ingest.Style_spec()
    first = tile_ingest.render_synthetic_tile(
        record.city_name, record.point, "satellite", style, 64, 0)
    second = tile_ingest.render_synthetic_tile(
        record.city_name, record.point, "satellite", style, 64, 0)
    other_seed = tile_ingest.render_synthetic_tile(
        record.city_name, record.point, "satellite", style, 64, 1)
    tile_ingest.validate_image(first)
    assert np.array_equal(first, second)
    assert not np.array_equal(first, other_seed)
    with pytest.raises(base.Config_error):
        tile_ingest.render_synthetic_tile(record.city_name, record.point,
                                          "infrared", style, 64, 0)
    return

def test_render_road_density_follows_city_style():
    names = ["city_{:03d}".format(i) for i in range(50)]
    densities = {name: tile_ingest.City_style(name, 0)\
                 .expected_road_density() for name in names}
    sparse = min(names, key=lambda name: densities[name])
    dense = max(names, key=lambda name: densities[name])
    assert densities[dense] > 3.0 * densities[sparse]

    rng = np.random.Generator(np.random.Philox(key=8))
    fractions = {}
    for name in [sparse, dense]:
        fractions[name] = []
        for i in range(20):
            point = geo_sampler.Sample_point(rng.uniform(-50, 50),
                                             rng.uniform(-150, 150), name)
            layout, city_style, unused = tile_ingest.render_layout(
                name, point, 256, 0)
            fractions[name].append(np.mean(layout == tile_ingest.ROAD))
    difference = np.mean(fractions[dense]) - np.mean(fractions[sparse])
    assert difference > max(np.std(fractions[dense]),
                            np.std(fractions[sparse]))
    return

def test_validate_image():
    tile_ingest.validate_image(np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(base.Validation_error):
        tile_ingest.validate_image(np.zeros((4, 4, 3), dtype=np.float32))
    with pytest.raises(base.Validation_error):
        tile_ingest.validate_image(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(base.Validation_error):
        tile_ingest.validate_image(np.zeros((0, 4, 3), dtype=np.uint8))
    return

def test_downsample():
    image = np.full((64, 64, 3), 77, dtype=np.uint8)
    small = tile_ingest.downsample(image, 16)
    assert small.shape == (16, 16, 3)
    assert small.dtype == np.uint8
    assert np.all(small == 77)
    assert tile_ingest.downsample(image, 64) is image
    return

def test_tile_source_synthetic_cache(tiny_manifest, tmp_path):
    source = tile_ingest.Tile_source("synthetic", cache_dir=str(tmp_path),
                                     seed=tiny_manifest.seed)
    record = tiny_manifest.domain_records("map")[0]
    image = source.load(record)
    cache_filename = os.path.join(str(tmp_path), record.cache_path)
    assert os.path.exists(cache_filename)
    assert np.array_equal(source.load(record), image)
    satellite = source.load(record, "satellite")
    assert not np.array_equal(satellite, image)
    return

def test_tile_source_cache_only(tiny_manifest, tmp_path):
    source = tile_ingest.Tile_source("cache_only", cache_dir=str(tmp_path))
    record = tiny_manifest.domain_records("satellite")[0]
    with pytest.raises(base.Missing_tile_error):
        source.load(record)
    with pytest.raises(base.Config_error):
        tile_ingest.Tile_source("cache_only")
    with pytest.raises(base.Config_error):
        tile_ingest.Tile_source("online", cache_dir=str(tmp_path))
    with pytest.raises(base.Config_error):
        tile_ingest.Tile_source("carrier_pigeon")
    return

def test_tile_source_online(tiny_manifest, tmp_path):
    fetcher, session, fake_clock = make_fetcher(
        tmp_path, [Fake_response(200, png_bytes((5, 6, 7), 64))])
    source = tile_ingest.Tile_source("online", cache_dir=str(tmp_path),
                                     fetcher=fetcher, api_key="secret")
    record = tiny_manifest.domain_records("satellite")[1]
    image = source.load(record)
    assert tuple(image[10, 10]) == (5, 6, 7)
    assert os.path.exists(os.path.join(str(tmp_path), record.cache_path))
    source.load(record)
    assert session.calls == 1
    return

def test_load_batch(tiny_manifest):
    images = tile_ingest.load_batch(tiny_manifest, [0, 5, 2], "satellite")
    assert len(images) == 3
    for image in images:
        assert image.shape == (64, 64, 3)
    with pytest.raises(base.Validation_error):
        tile_ingest.load_batch(tiny_manifest, [40], "satellite")
    return

def test_make_tile_source(tiny_config, tiny_manifest, monkeypatch):
    source = tile_ingest.make_tile_source(tiny_config, tiny_manifest)
    assert source.mode == "synthetic"
    assert source.cache_dir is None
    tiny_config.offline = False
    monkeypatch.delenv(base.API_KEY_ENV, raising=False)
    with pytest.raises(base.Config_error):
        tile_ingest.make_tile_source(tiny_config, tiny_manifest)
    monkeypatch.setenv(base.API_KEY_ENV, "secret")
    source = tile_ingest.make_tile_source(tiny_config, tiny_manifest,
                                          session=Fake_session([]))
    assert source.mode == "online"
    assert source.api_key == "secret"
    return
