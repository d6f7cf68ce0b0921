"""
geo_sampler.py

Define cities, population-scaled sampling discs and water masks, and draw
area-uniform random sample locations inside each city's land area.

Distances are great-circle distances on a spherical Earth (haversine).
Water-mask containment is evaluated in the (latitude, longitude) plane.
"""

import math
import logging

import numpy as np
import pandas as pd
import shapely

import cityssl.modules.common_base as base

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0
RADIUS_EXPONENT = 0.85
DEFAULT_RADIUS_K = 0.05
# Web-Mercator ground width of one pixel at the equator, zoom 0
EQUATOR_M_PER_PIXEL = 156543.03392
MAX_MERCATOR_LATITUDE = 85.05113
MAX_ZOOM = 22
ATTEMPTS_PER_SAMPLE = 10000
BOUNDARY_TOLERANCE = 1e-9
CITY_CSV_COLUMNS = ["name", "country", "latitude", "longitude", "population"]

class City():
    """
    A city: the class label of the benchmark.

    Attributes:
    -----------
    name : str
        Unique (within a manifest) city name.

    country : str
        The country the city belongs to; used by blocklists.

    latitude : float
        Latitude of the city center in degrees, within [-90, 90].

    longitude : float
        Longitude of the city center in degrees, within [-180, 180].

    population : int
        Number of inhabitants, strictly positive.
    """

    def __init__(self, name, country, latitude, longitude, population):
        self.name = str(name)
        self.country = str(country)
        self.latitude = float(latitude)
        self.longitude = float(longitude)
        self.population = int(population)
        return

    def validate(self):
        """
        Raise a Validation_error if this city violates its invariants.
        """
        if self.name.strip() == "":
            raise base.Validation_error("City name must be nonempty.")
        if not -90.0 <= self.latitude <= 90.0:
            raise base.Validation_error("Latitude of {} out of range: {}"\
                                        .format(self.name, self.latitude))
        if not -180.0 <= self.longitude <= 180.0:
            raise base.Validation_error("Longitude of {} out of range: {}"\
                                        .format(self.name, self.longitude))
        if self.population <= 0:
            raise base.Validation_error("Population of {} must be positive."\
                                        .format(self.name))
        return

    def to_dict(self):
        return {"name": self.name, "country": self.country,
                "latitude": self.latitude, "longitude": self.longitude,
                "population": self.population}

    @classmethod
    def from_dict(cls, city_dict):
        return cls(city_dict["name"], city_dict["country"],
                   city_dict["latitude"], city_dict["longitude"],
                   city_dict["population"])

    def __eq__(self, other):
        return isinstance(other, City) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "City({!r}, {!r}, {}, {}, {})".format(
            self.name, self.country, self.latitude, self.longitude,
            self.population)

class Sampling_disc():
    """
    A closed disc on the sphere: all points within radius_m meters
    (great-circle distance) of the center.
    """

    def __init__(self, center, radius_m):
        self.center = (float(center[0]), float(center[1]))
        self.radius_m = float(radius_m)
        if not (math.isfinite(self.radius_m) and self.radius_m > 0.0):
            raise base.Validation_error(
                "Disc radius must be strictly positive and finite, not {}"\
                .format(radius_m))
        return

    def __repr__(self):
        return "Sampling_disc({}, {})".format(self.center, self.radius_m)

class Water_mask():
    """
    A set of polygons (water bodies) excluded from sampling.

    Attributes:
    -----------
    polygons : list
        Each polygon is a list of (latitude, longitude) vertices. The
        ring is implicitly closed; the first vertex need not repeat.
    """

    def __init__(self, polygons=None):
        if polygons is None:
            polygons = []
        self.polygons = [[(float(lat), float(lon)) for lat, lon in ring] \
                         for ring in polygons]
        self._geometries = None
        return

    def validate(self):
        """
        Raise a Validation_error for any ring with fewer than 3 vertices.
        """
        for i, ring in enumerate(self.polygons):
            if len(ring) < 3:
                raise base.Validation_error(
                    "Water mask polygon {} has {} vertices; at least 3 are "\
                    "required.".format(i, len(ring)))
        return

    def geometries(self):
        """
        Return the shapely polygons of this mask, built and prepared on
        first use.
        """
        if self._geometries is None:
            self.validate()
            self._geometries = []
            for ring in self.polygons:
                polygon = shapely.Polygon(ring)
                shapely.prepare(polygon)
                self._geometries.append(polygon)
        return self._geometries

    def contains(self, latitudes, longitudes):
        """
        Vectorized containment: return a boolean array that is True
        where a point lies strictly inside any polygon of the mask.
        """
        latitudes = np.asarray(latitudes, dtype=np.float64)
        longitudes = np.asarray(longitudes, dtype=np.float64)
        inside = np.zeros(latitudes.shape, dtype=bool)
        for polygon in self.geometries():
            inside |= shapely.contains_xy(polygon, latitudes, longitudes)
        return inside

class Sample_point():
    """
    A sampled location, owned by one city.
    """

    def __init__(self, latitude, longitude, city_name):
        self.latitude = float(latitude)
        self.longitude = float(longitude)
        self.city_name = str(city_name)
        return

    def to_dict(self):
        return {"latitude": self.latitude, "longitude": self.longitude,
                "city_name": self.city_name}

    @classmethod
    def from_dict(cls, point_dict):
        return cls(point_dict["latitude"], point_dict["longitude"],
                   point_dict["city_name"])

    def __eq__(self, other):
        return isinstance(other, Sample_point) \
            and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "Sample_point({}, {}, {!r})".format(
            self.latitude, self.longitude, self.city_name)

def compute_radius(population, k=DEFAULT_RADIUS_K):
    """
    Return the sampling radius in meters: k * population^0.85.

    Parameters:
    -----------
    population : int or float
        Number of inhabitants, at least 1.

    k : float
        Proportionality constant in meters per person^0.85. The value
        is not calibrated against real urban extents.

    Returns:
    --------
    radius : float
        The disc radius in meters.
    """
    if not (math.isfinite(population) and population >= 1):
        raise base.Domain_error("Population must be at least 1, not {}"\
                                .format(population))
    if not (math.isfinite(k) and k > 0.0):
        raise base.Domain_error("k must be strictly positive, not {}"\
                                .format(k))
    return k * population ** RADIUS_EXPONENT

def make_disc(city, k=DEFAULT_RADIUS_K):
    """
    Return the population-scaled sampling disc centered on a city.
    """
    return Sampling_disc((city.latitude, city.longitude),
                         compute_radius(city.population, k))

def haversine(lat1, lon1, lat2, lon2):
    """
    Great-circle distance in meters between points given in degrees.
    Accepts scalars or numpy arrays.
    """
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    d_phi = phi2 - phi1
    d_lambda = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(d_phi / 2.0)**2 \
        + np.cos(phi1) * np.cos(phi2) * np.sin(d_lambda / 2.0)**2
    a = np.clip(a, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))

def destination(lat, lon, distance_m, bearing_rad):
    """
    Return the (latitude, longitude) reached by travelling distance_m
    meters along a great circle from (lat, lon) with the given initial
    bearing. Accepts numpy arrays for distance and bearing.
    """
    phi1 = math.radians(lat)
    lambda1 = math.radians(lon)
    delta = np.asarray(distance_m) / EARTH_RADIUS_M
    sin_phi2 = np.sin(phi1) * np.cos(delta) \
        + np.cos(phi1) * np.sin(delta) * np.cos(bearing_rad)
    sin_phi2 = np.clip(sin_phi2, -1.0, 1.0)
    phi2 = np.arcsin(sin_phi2)
    lambda2 = lambda1 + np.arctan2(
        np.sin(bearing_rad) * np.sin(delta) * np.cos(phi1),
        np.cos(delta) - np.sin(phi1) * sin_phi2)
    lon2 = (np.degrees(lambda2) + 540.0) % 360.0 - 180.0
    return np.degrees(phi2), lon2

def points_in_disc(latitudes, longitudes, disc):
    """
    Vectorized closed-disc test; see point_in_disc().
    """
    distances = haversine(disc.center[0], disc.center[1], latitudes,
                          longitudes)
    return distances <= disc.radius_m * (1.0 + BOUNDARY_TOLERANCE)

def point_in_disc(point, disc):
    """
    Return True if the haversine distance between the point and the
    disc center is at most the disc radius (closed disc, with a 1e-9
    relative tolerance on the boundary).
    """
    return bool(points_in_disc(point.latitude, point.longitude, disc))

def point_in_mask(point, mask):
    """
    Return True if the point lies inside any polygon of the water mask.
    """
    mask.validate()
    return bool(mask.contains(point.latitude, point.longitude))

def sample_points(disc, mask, n, seed, city_name="", max_attempts=None):
    """
    Draw n sample points uniformly (by area) over the part of the disc
    not covered by the water mask.

    Candidate radii are drawn as radius_m * sqrt(u) with a uniform
    bearing, then candidates inside the mask are rejected. Candidates
    are generated in deterministic chunks, so identical seeds produce
    identical point sequences.

    Parameters:
    -----------
    disc : Sampling_disc
        The sampling area.

    mask : Water_mask or None
        Polygons to exclude. None means no exclusion.

    n : int
        Number of points to return, at least 1.

    seed : int
        Seed of the counter-based generator.

    city_name : str
        Owner recorded on every returned point.

    max_attempts : int or None
        Rejection budget. Default: 10,000 * n.

    Returns:
    --------
    points : list
        A list of n Sample_point objects.
    """
    if n < 1:
        raise base.Domain_error("n must be at least 1, not {}".format(n))
    if mask is None:
        mask = Water_mask()
    mask.validate()
    if max_attempts is None:
        max_attempts = ATTEMPTS_PER_SAMPLE * n
    rng = np.random.Generator(np.random.Philox(key=int(seed) % (1 << 64)))
    accepted_lat = []
    accepted_lon = []
    num_accepted = 0
    attempts = 0
    while num_accepted < n:
        if attempts >= max_attempts:
            raise base.Masked_disc_error(
                "Sampling disc around {} appears fully masked: {} of {} "\
                "points accepted after {} attempts.".format(
                    disc.center, num_accepted, n, attempts))
        chunk = min(2 * (n - num_accepted) + 16, max_attempts - attempts)
        u = rng.random(chunk)
        bearing = rng.random(chunk) * 2.0 * math.pi
        distance = disc.radius_m * np.sqrt(u)
        lat, lon = destination(disc.center[0], disc.center[1], distance,
                               bearing)
        admissible = points_in_disc(lat, lon, disc)
        if len(mask.polygons) > 0:
            admissible &= ~mask.contains(lat, lon)
        attempts += chunk
        keep = np.flatnonzero(admissible)[:n - num_accepted]
        accepted_lat.extend(lat[keep].tolist())
        accepted_lon.extend(lon[keep].tolist())
        num_accepted += len(keep)

    return [Sample_point(lat, lon, city_name) for lat, lon \
            in zip(accepted_lat, accepted_lon)]

def ground_resolution(latitude, zoom, tile_px):
    """
    Return the Web-Mercator ground width in meters of a square tile of
    tile_px pixels at the given latitude and zoom level.
    """
    if abs(latitude) >= MAX_MERCATOR_LATITUDE:
        raise base.Domain_error("Latitude {} is outside the Web-Mercator "\
                                "projection.".format(latitude))
    if not (isinstance(zoom, (int, np.integer)) and 0 <= zoom <= MAX_ZOOM):
        raise base.Domain_error("Zoom must be an integer in [0, {}], not {}"\
                                .format(MAX_ZOOM, zoom))
    if tile_px <= 0:
        raise base.Domain_error("tile_px must be positive.")
    return tile_px * EQUATOR_M_PER_PIXEL * math.cos(math.radians(latitude)) \
        / 2**zoom

def read_cities_csv(csv_filename):
    """
    Read a city list from a UTF-8 CSV file with the header
    name,country,latitude,longitude,population. Names must be unique.
    """
    frame = pd.read_csv(csv_filename, encoding="utf-8",
                        dtype={"name": str, "country": str})
    missing = [column for column in CITY_CSV_COLUMNS \
               if column not in frame.columns]
    if len(missing) > 0:
        raise base.Validation_error("City file {} is missing column(s): {}"\
                                    .format(csv_filename, missing))
    cities = []
    for row in frame.itertuples(index=False):
        city = City(row.name, row.country, row.latitude, row.longitude,
                    row.population)
        city.validate()
        cities.append(city)
    check_unique_names(cities)
    return cities

def check_unique_names(cities):
    """
    Raise a Validation_error if two cities share a name.
    """
    seen = set()
    for city in cities:
        if city.name in seen:
            raise base.Validation_error("Duplicate city name: {}".format(
                city.name))
        seen.add(city.name)
    return

def read_water_mask(mask_filename):
    """
    Read a water mask: one polygon per line, as comma-separated
    "lat lon" vertex pairs. Blank lines and '#' comments are skipped.
    """
    polygons = []
    with open(mask_filename, "r", encoding="utf-8") as mask_file:
        for line_number, line in enumerate(mask_file, start=1):
            line = line.split("#")[0].strip()
            if line == "":
                continue
            ring = []
            for vertex in line.split(","):
                fields = vertex.split()
                if len(fields) != 2:
                    raise base.Validation_error(
                        "Bad vertex '{}' on line {} of {}".format(
                            vertex.strip(), line_number, mask_filename))
                ring.append((float(fields[0]), float(fields[1])))
            polygons.append(ring)
    mask = Water_mask(polygons)
    mask.validate()
    return mask

def synthetic_cities(num_cities, seed):
    """
    Generate a deterministic list of fictional cities with plausible
    coordinates and populations above 300,000.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed) % (1 << 64)))
    latitudes = rng.uniform(-60.0, 60.0, num_cities)
    longitudes = rng.uniform(-180.0, 180.0, num_cities)
    populations = np.exp(rng.uniform(math.log(3.0e5), math.log(2.0e7),
                                     num_cities))
    cities = []
    for i in range(num_cities):
        cities.append(City("city_{:03d}".format(i), "synthland",
                           round(float(latitudes[i]), 6),
                           round(float(longitudes[i]), 6),
                           int(populations[i])))
    return cities
