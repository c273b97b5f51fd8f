# Package principal du classifieur audio d'incidents routiers

__version__ = "1.0.0"
