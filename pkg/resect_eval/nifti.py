"""
NIfTI-1 volume I/O

Reading accepts single-file (``n+1``) and paired (``ni1``) layouts in
either byte order, plain or gzip-compressed. Writing always produces a
little-endian single-file ``.nii`` or ``.nii.gz`` with the payload at
offset 352 and the sform/qform set from the grid affine.
"""

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.openers import ImageOpener

from .errors import (
    CorruptFileError,
    InvalidArgumentError,
    NotNiftiError,
    UnsupportedFormatError,
    VolumeIOError,
)
from .grid import PROBABILITY, RAW, BinaryMask, GridGeometry, VoxelGrid

logger = logging.getLogger(__name__)

SUPPORTED_DATATYPES = ('uint8', 'int16', 'int32', 'float32', 'float64')
HEADER_SIZE = 348
SINGLE_FILE_MAGIC = 'n+1'
PAIRED_MAGIC = 'ni1'

PathLike = Union[str, Path]


@dataclass
class NiftiHeader:
    """The header fields the toolkit relies on, as read from disk"""

    sizeof_hdr: int
    dim: Tuple[int, ...]
    datatype: int
    dtype: str
    pixdim: Tuple[float, ...]
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    qform: np.ndarray
    sform: np.ndarray
    magic: str
    byte_order: str
    vox_offset: float
    affine: np.ndarray
    warnings: List[str] = field(default_factory=list)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.dim[1:1 + self.dim[0]])


def _header_path(path: Path) -> Path:
    """Paired images keep their header in the .hdr twin of the .img file"""
    name = path.name
    for img_ext, hdr_ext in (('.img.gz', '.hdr.gz'), ('.img', '.hdr')):
        if name.endswith(img_ext):
            return path.with_name(name[: -len(img_ext)] + hdr_ext)
    return path


def _read_header_block(path: Path) -> bytes:
    try:
        with ImageOpener(str(path), 'rb') as f:
            return f.read(HEADER_SIZE)
    except FileNotFoundError:
        raise VolumeIOError(f"File not found: {path}") from None
    except (EOFError, zlib.error, OSError) as e:
        raise CorruptFileError(f"Cannot read header of {path}: {e}") from None


def _detect_byte_order(block: bytes, path: Path) -> str:
    if int.from_bytes(block[:4], 'little') == HEADER_SIZE:
        return '<'
    if int.from_bytes(block[:4], 'big') == HEADER_SIZE:
        return '>'
    raise NotNiftiError(f"{path}: sizeof_hdr is not {HEADER_SIZE} in either byte order")


def _choose_affine(hdr: nib.Nifti1Header, warnings: List[str]) -> np.ndarray:
    """sform when set, else qform, else a pixdim diagonal"""
    sform_code = int(hdr['sform_code'])
    qform_code = int(hdr['qform_code'])
    sform = hdr.get_sform()
    qform = hdr.get_qform()

    if sform_code > 0 and abs(np.linalg.det(sform[:3, :3])) < 1e-12:
        warnings.append('sform is singular; ignoring it')
        sform_code = 0
    if sform_code > 0 and qform_code > 0 and not np.allclose(sform, qform, atol=1e-4):
        warnings.append('sform and qform disagree; using sform')
    if sform_code > 0:
        return sform
    if qform_code > 0:
        return qform
    zooms = [float(z) for z in hdr['pixdim'][1:4]]
    return np.diag(zooms + [1.0])


def read_header(path: PathLike) -> NiftiHeader:
    """
    Parse and validate a NIfTI-1 header

    Raises:
        NotNiftiError: sizeof_hdr or magic is wrong
        UnsupportedFormatError: rank or datatype outside what the toolkit handles
        CorruptFileError: the header is truncated or internally inconsistent
    """
    path = _header_path(Path(path))
    block = _read_header_block(path)
    if len(block) < HEADER_SIZE:
        raise CorruptFileError(f"{path}: header truncated to {len(block)} bytes")

    byte_order = _detect_byte_order(block, path)
    magic = block[344:348]
    if magic[3:] != b'\x00' or magic[:3].decode('latin-1') not in (SINGLE_FILE_MAGIC, PAIRED_MAGIC):
        raise NotNiftiError(f"{path}: bad magic {magic!r}")

    hdr = nib.Nifti1Header(block, endianness=byte_order, check=False)
    dim = tuple(int(d) for d in hdr['dim'])
    if dim[0] not in (3, 4):
        raise UnsupportedFormatError(f"{path}: only 3D/4D volumes are supported, dim[0]={dim[0]}")
    if any(d < 1 for d in dim[1:1 + dim[0]]):
        raise CorruptFileError(f"{path}: non-positive dimension in {dim[1:1 + dim[0]]}")
    if dim[0] == 4 and dim[4] != 1:
        raise UnsupportedFormatError(f"{path}: 4D volumes with {dim[4]} frames are not supported")
    pixdim = tuple(float(p) for p in hdr['pixdim'])
    if any(p <= 0 for p in pixdim[1:4]):
        raise CorruptFileError(f"{path}: non-positive spatial pixdim {pixdim[1:4]}")

    try:
        dtype = np.dtype(hdr.get_data_dtype()).newbyteorder('=')
    except Exception as e:
        raise UnsupportedFormatError(f"{path}: unknown datatype code {int(hdr['datatype'])}: {e}") from None
    if dtype.name not in SUPPORTED_DATATYPES:
        raise UnsupportedFormatError(
            f"{path}: datatype {dtype.name} not supported. Must be one of: {list(SUPPORTED_DATATYPES)}"
        )

    warnings: List[str] = []
    affine = _choose_affine(hdr, warnings)
    for message in warnings:
        logger.warning(f"{path}: {message}")

    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=dim,
        datatype=int(hdr['datatype']),
        dtype=dtype.name,
        pixdim=pixdim,
        scl_slope=float(hdr['scl_slope']),
        scl_inter=float(hdr['scl_inter']),
        qform_code=int(hdr['qform_code']),
        sform_code=int(hdr['sform_code']),
        qform=hdr.get_qform(),
        sform=hdr.get_sform(),
        magic=magic[:3].decode('latin-1'),
        byte_order=byte_order,
        vox_offset=float(hdr['vox_offset']),
        affine=affine,
        warnings=warnings,
    )


def _load_array(path: Path) -> np.ndarray:
    try:
        image = nib.load(str(path), mmap=False)
    except FileNotFoundError:
        raise VolumeIOError(f"File not found: {path}") from None
    except ImageFileError as e:
        raise NotNiftiError(f"{path}: {e}") from None
    try:
        # dataobj applies scl_slope/scl_inter when the slope is set
        data = np.asanyarray(image.dataobj)
    except (OSError, ValueError, EOFError, zlib.error) as e:
        raise CorruptFileError(f"{path}: payload unreadable: {e}") from None
    return np.array(data, dtype=data.dtype.newbyteorder('='))


def read_volume(path: PathLike, kind: str = RAW) -> VoxelGrid:
    """
    Read a scan or probability map

    Args:
        path: .nii, .nii.gz, or a .hdr/.img pair
        kind: Intensity tag for the returned grid ('raw', 'normalized', 'probability')

    Returns:
        VoxelGrid with data in the file's datatype (or float when scaled)
    """
    path = Path(path)
    header = read_header(path)
    data = _load_array(path)
    if data.ndim == 4:
        data = data[..., 0]
    geometry = GridGeometry.from_affine(data.shape, header.affine)
    logger.debug(f"Read {path} shape={geometry.shape} dtype={data.dtype} order={header.byte_order}")
    return VoxelGrid(geometry, data, kind)


def read_probability(path: PathLike) -> VoxelGrid:
    return read_volume(path, PROBABILITY)


def read_mask(path: PathLike) -> BinaryMask:
    """Read a label file; any value > 0.5 after scaling becomes foreground"""
    grid = read_volume(path)
    return BinaryMask(grid.geometry, (grid.data > 0.5).astype(np.uint8))


def _default_datatype(volume: Union[VoxelGrid, BinaryMask]) -> str:
    if isinstance(volume, BinaryMask):
        return 'uint8'
    return 'float32'


def write_volume(
    volume: Union[VoxelGrid, BinaryMask], path: PathLike, datatype: Optional[str] = None
) -> Path:
    """
    Write a grid or mask as single-file NIfTI-1

    Masks default to uint8 and grids to float32. The file is gzip-compressed
    when the path ends in ``.gz``.
    """
    path = Path(path)
    datatype = datatype or _default_datatype(volume)
    if datatype not in SUPPORTED_DATATYPES:
        raise InvalidArgumentError(
            f"Unsupported datatype '{datatype}'. Must be one of: {list(SUPPORTED_DATATYPES)}"
        )
    if not (path.name.endswith('.nii') or path.name.endswith('.nii.gz')):
        raise InvalidArgumentError(f"Output path must end in .nii or .nii.gz: {path}")

    dtype = np.dtype(datatype)
    data = np.asarray(volume.data)
    if dtype.kind in 'iu' and data.dtype.kind == 'f':
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError(f"Cannot store non-finite values as {datatype}")
        data = np.rint(data)
    if dtype.kind in 'iu' and data.size:
        info = np.iinfo(dtype)
        low, high = data.min(), data.max()
        if low < info.min or high > info.max:
            raise InvalidArgumentError(
                f"Values span [{low}, {high}], outside the {datatype} range [{info.min}, {info.max}]"
            )
    data = data.astype(dtype)

    affine = np.asarray(volume.geometry.affine, dtype=np.float64)
    header = nib.Nifti1Header(endianness='<')
    header.set_data_dtype(dtype)
    image = nib.Nifti1Image(data, affine, header=header)
    image.set_sform(affine, code='scanner')
    image.set_qform(affine, code='scanner')

    try:
        nib.save(image, str(path))
    except OSError as e:
        raise VolumeIOError(f"Failed to write {path}: {e}") from None
    logger.debug(f"Wrote {path} ({datatype})")
    return path

