# Tests du classifieur audio d'incidents routiers
